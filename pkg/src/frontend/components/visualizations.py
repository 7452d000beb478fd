import logging
from pathlib import Path
from typing import Dict, Tuple, Union

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

logger = logging.getLogger(__name__)


class TraceVisualizations:
    """Learning-curve and matching-error figures for training traces"""

    COLORS = {
        'noise': {
            0.01: '#1E88E5',  # Blue
            0.02: '#FB8C00',  # Orange
            0.03: '#43A047',  # Green
        },
        'init': {
            'perturbed': '#1E88E5',
            'pca': '#E53935',
            'random': '#8E24AA',
        },
        'background': '#FFFFFF',
        'text': '#212121',
        'grid': '#E0E0E0',
    }

    CHART_TEMPLATE = dict(
        font=dict(family="Arial", size=12, color=COLORS['text']),
        paper_bgcolor=COLORS['background'],
        plot_bgcolor=COLORS['background'],
        margin=dict(t=60, b=60, l=60, r=30),
    )

    AXIS_STYLE = dict(
        gridcolor=COLORS['grid'],
        tickfont=dict(size=12, color=COLORS['text']),
        title_font=dict(size=14, color=COLORS['text']),
        zerolinecolor=COLORS['grid'],
    )

    LEGEND_LAYOUT = dict(
        orientation="h",
        yanchor="bottom",
        y=-0.3,
        xanchor="center",
        x=0.5,
        font=dict(size=12),
    )

    INIT_TITLES = {'perturbed': 'Perturbed', 'pca': 'PCA', 'random': 'Random'}

    @staticmethod
    def validate_trace(df: pd.DataFrame, required: Tuple[str, ...] = ('iter', 'loss')) -> Tuple[bool, str]:
        """Check that a trace frame has the columns a figure needs."""
        if df is None or df.empty:
            return False, "Trace is empty"
        missing = [col for col in required if col not in df.columns]
        if missing:
            return False, f"Missing columns: {', '.join(missing)}"
        return True, ""

    @staticmethod
    def _noise_color(sigma: float) -> str:
        return TraceVisualizations.COLORS['noise'].get(round(sigma, 4), TraceVisualizations.COLORS['text'])

    @staticmethod
    def create_learning_curves(traces: Dict[Tuple[str, float], pd.DataFrame]) -> go.Figure:
        """One panel per initialisation, one loss curve per noise level."""
        inits = [init for init in TraceVisualizations.INIT_TITLES if any(k[0] == init for k in traces)]
        fig = make_subplots(
            rows=1, cols=max(len(inits), 1),
            subplot_titles=[f"<b>{TraceVisualizations.INIT_TITLES[i]}</b>" for i in inits],
            shared_yaxes=True,
        )

        for col, init in enumerate(inits, start=1):
            for (trace_init, sigma), df in sorted(traces.items()):
                if trace_init != init:
                    continue
                valid, message = TraceVisualizations.validate_trace(df)
                if not valid:
                    logger.warning(f"Skipping {init} sigma={sigma}: {message}")
                    continue
                fig.add_trace(
                    go.Scatter(
                        x=df['iter'],
                        y=df['loss'],
                        mode='lines',
                        name=f"σ = {sigma:g}",
                        legendgroup=f"{sigma:g}",
                        showlegend=col == 1,
                        line=dict(color=TraceVisualizations._noise_color(sigma), width=2),
                        hovertemplate="iter %{x}<br>loss %{y:.4f}<extra></extra>",
                    ),
                    row=1, col=col,
                )
            fig.update_xaxes(title_text="Iteration", row=1, col=col, **TraceVisualizations.AXIS_STYLE)

        fig.update_yaxes(title_text="Reconstruction loss", row=1, col=1, **TraceVisualizations.AXIS_STYLE)
        fig.update_layout(
            title="<b>Learning curves</b>",
            legend=TraceVisualizations.LEGEND_LAYOUT,
            height=400,
            width=1100,
            **TraceVisualizations.CHART_TEMPLATE,
        )
        return fig

    @staticmethod
    def create_matching_error_chart(df: pd.DataFrame) -> go.Figure:
        """Matched squared Frobenius error per iteration for each initialisation."""
        valid, message = TraceVisualizations.validate_trace(df, ('iter',))
        fig = go.Figure()
        if not valid:
            logger.warning(f"Empty matching-error chart: {message}")
            return fig

        for init, title in TraceVisualizations.INIT_TITLES.items():
            if init not in df.columns:
                continue
            fig.add_trace(go.Scatter(
                x=df['iter'],
                y=df[init],
                mode='lines+markers',
                name=title,
                marker=dict(size=4),
                line=dict(color=TraceVisualizations.COLORS['init'][init], width=2),
                hovertemplate=f"<b>{title}</b><br>iter %{{x}}<br>error %{{y:.4f}}<extra></extra>",
            ))

        fig.update_layout(
            title="<b>Matched ‖W − A‖²<sub>F</sub></b>",
            xaxis=dict(title="Iteration", **TraceVisualizations.AXIS_STYLE),
            yaxis=dict(title="Squared Frobenius error", **TraceVisualizations.AXIS_STYLE),
            legend=TraceVisualizations.LEGEND_LAYOUT,
            height=450,
            width=700,
            **TraceVisualizations.CHART_TEMPLATE,
        )
        return fig

    @staticmethod
    def write_svg(fig: go.Figure, path: Union[str, Path]) -> bool:
        """Export a figure as SVG; returns False (and logs) when no export backend is usable."""
        try:
            fig.write_image(str(path), format='svg')
        except (ValueError, ImportError, RuntimeError, OSError) as e:
            logger.warning(f"SVG export to {path} skipped: {e}")
            return False
        return True
