# %% [markdown]
# # Where does each model win?
#
# Positional denoising capability is the negated expected squared noise
# error at each pixel.  A win map counts, over Monte Carlo noise draws, which
# model has the lowest error in each region.  Two analytic "experts" that
# each know the true noise on one half of the image make the picture obvious.

# %%
import torch

from afa.analysis import heatmap_png, positional_capability, win_map
from afa.diffusion import PerfectEpsOracle, make_schedule
from afa.unet import Condition

sched = make_schedule()


class HalfKnower(PerfectEpsOracle):
    def __init__(self, sched, left):
        super().__init__(sched)
        self.left = left

    def __call__(self, x_t, c, t):
        eps = super().__call__(x_t, c, t)
        mask = torch.zeros(x_t.shape[-1])
        mask[: x_t.shape[-1] // 2] = 1
        return eps * (mask if self.left else 1 - mask)


x0 = torch.rand(1, 3, 16, 16) * 2 - 1
c = Condition(torch.zeros(1, 4, 32))
models = [HalfKnower(sched, True), HalfKnower(sched, False)]

# %%
cap = positional_capability(models[0], x0, c, 500, sched, M=200, seed=0)
print("left half capability:", cap.data[:, :8].mean().round(3), " right half:", cap.data[:, 8:].mean().round(3))

# %%
wm = win_map(models, x0, c, 500, sched, region_size=4, M=100, seed=0)
print("share of wins for the left expert, per 4x4 region:\n", wm.data[..., 0])
heatmap_png(wm.data[..., 0], "win_map_left.png")
