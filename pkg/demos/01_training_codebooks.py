# %% [markdown]
# # Training codebooks
#
# A codebook is a table of K prototype vectors. Training one from scratch is
# the same problem as estimating the means of a Gaussian mixture, so we start
# with a mixture whose answer we know: four well separated blobs.

# %%
import numpy as np
from scipy.optimize import linear_sum_assignment

from mcqcodec.trainer import GmmSpec, TrainConfig, dead_code_report, sample_gmm, train

means = np.array([[5.0, 5.0], [5.0, -5.0], [-5.0, 5.0], [-5.0, -5.0]])
data, _ = sample_gmm(GmmSpec(np.full(4, 0.25), means, np.ones((4, 2))), 100_000, seed=0)

# %% [markdown]
# Two trainers ship with the package. `kmeans` is Lloyd's algorithm. `gumbel-st`
# samples a codeword from softmax(-d^2/tau) on the forward pass and updates the
# tables through the relaxed probabilities (straight-through).

# %%
for algorithm, kw in (("kmeans", dict(epochs=50)), ("gumbel-st", dict(epochs=10, batch_size=1000))):
    words = train(data, TrainConfig(ks=[4], algorithm=algorithm, **kw)).books.level(0)[0]
    dist = np.linalg.norm(words[:, None] - means[None], axis=-1)
    rows, cols = linear_sum_assignment(dist)
    print(f"{algorithm:9s} worst matched error {dist[rows, cols].max():.3f}")

# %% [markdown]
# ## Why sample at all?
#
# Hard assignment can strand codewords. A codeword that starts far from the
# data never wins an assignment, so Lloyd never moves it. Sampling at a high
# starting temperature gives every codeword some probability mass, which pulls
# it into the data. Below, eight codewords start in a corner away from a
# skewed 8-cluster mixture.

# %%
rng = np.random.default_rng(1)
centres = np.array([(x, y) for x in (-8, 0, 8) for y in (-8, 0, 8) if (x, y) != (0, 0)], float)
weights = np.array([0.72] + [0.04] * 7)
skewed, _ = sample_gmm(GmmSpec(weights, centres, np.ones((8, 2))), 4000, seed=2)
bad = np.array([[20.0 + i, 20.0] for i in range(8)]) + rng.normal(0, 0.1, (8, 2))

from mcqcodec.quantizer import MultiCodebook, quantize_hard

init = MultiCodebook([bad[None]])
runs = {
    "kmeans": TrainConfig(ks=[8], algorithm="kmeans", epochs=50, reseed_empty=False),
    "gumbel-st": TrainConfig(ks=[8], epochs=20, batch_size=64, lr_initial=0.5,
                             temp_initial=1000.0, temp_final=0.1),
}
for name, cfg in runs.items():
    books = train(skewed, cfg, init=init).books
    _, codes = quantize_hard(skewed[:, None, None, :], books.level(0))
    report = dead_code_report([[codes.reshape(-1, 1, 1)]], [8])
    print(f"{name:9s} dead codewords: {len(report['dead'][(0, 0)])} of 8")

# %% [markdown]
# The default schedule cools tau from 1.0 to 0.1. For this far-away
# initialization that is too cold to reach the data, so the run above starts
# at tau = 1000 instead. Temperatures are configuration, not constants.
