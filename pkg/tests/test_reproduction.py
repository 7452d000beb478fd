"""
Full-size GMM training grid: three initialisations by three noise levels,
n = 784, m = 10, 10^4 fresh samples per iteration, 50 iterations.

With sampled batches the halving bias is near zero after about ten steps,
and from then on every unit also fires on part of the other components. All three
initialisations then settle around the same biased point near A (matched
error about 0.1 at sigma = 0.01), so the PCA and random starts are not
separated from the perturbed one by matched error.
"""
import numpy as np
import pytest

from src.frontend.experiment_cli import ExperimentConfig, run_grid

pytestmark = pytest.mark.slow

NOISE_LEVELS = (0.01, 0.02, 0.03)
INITS = ('perturbed', 'pca', 'random')


@pytest.fixture(scope='module')
def grid():
    return run_grid(ExperimentConfig(), NOISE_LEVELS, workers=1)


def test_grid_shape(grid):
    assert len(grid) == 9
    assert all(len(frame) == 51 for frame in grid.values())


def test_perturbed_learning_curve(grid):
    loss = grid[('perturbed', 0.01)]['loss']
    assert loss.iloc[-1] <= 0.1
    assert loss.iloc[-1] <= 0.2 * loss.iloc[1]


@pytest.mark.parametrize("init", INITS)
def test_final_loss_grows_with_noise(grid, init):
    finals = [grid[(init, sigma)]['loss'].iloc[-1] for sigma in NOISE_LEVELS]
    assert finals == sorted(finals)


@pytest.mark.parametrize("init", ['pca', 'random'])
def test_other_inits_still_reduce_loss(grid, init):
    loss = grid[(init, 0.01)]['loss']
    assert loss.iloc[-1] < 0.5 * loss.iloc[0]


def test_perturbed_init_stays_near_dictionary(grid):
    frob = grid[('perturbed', 0.01)]['frob_err'].to_numpy()
    assert frob[-1] <= 0.2
    assert frob[-1] <= 0.1 * frob[0]


@pytest.mark.parametrize("init", ['pca', 'random'])
def test_sampled_batches_bring_every_init_near_dictionary(grid, init):
    frob = grid[(init, 0.01)]['frob_err'].to_numpy()
    assert np.isfinite(frob).all()
    assert frob[-1] <= 0.2


@pytest.mark.xfail(reason="sampled-batch runs from PCA and random starts also end near A "
                          "(final matched errors 0.10, 0.079, 0.075)", strict=False)
def test_only_perturbed_init_recovers_dictionary(grid):
    perturbed = grid[('perturbed', 0.01)]['frob_err'].iloc[-1]
    for init in ('pca', 'random'):
        assert perturbed <= 0.05 * grid[(init, 0.01)]['frob_err'].iloc[-1]
