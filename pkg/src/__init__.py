"""Learning dynamics of weight-sharing autoencoders on synthetic generative models."""
