# %% [markdown]
# # Baselines: static merging and mixture-of-experts routing
#
# Merging averages parameters once; MBW uses one weight vector per block.
# MoE routing picks one model per sample (denoiser level) or per block,
# trained with Gumbel-softmax and a straight-through one-hot selection.

# %%
import torch

from afa.data import gen_dataset
from afa.diffusion import make_schedule
from afa.merging import MergeRecipe, merge
from afa.moe import MoeBundle, gumbel_probs, moe_forward, router_init
from afa.trainer import TrainConfig, train_moe
from afa.unet import DenoiserSpec, build_denoiser, denoiser_forward

spec = DenoiserSpec(n_down=2, n_up=2, base_channels=8, channel_mults=(1, 2), cond_dim=8,
                    img_size=8, n_tokens=2)
a, b = build_denoiser(spec, 1), build_denoiser(spec, 2)

# %% [markdown]
# Weight (1, 0) gives back the first model exactly; a block-wise recipe can
# take the encoder from one model and the decoder from the other.

# %%
first = merge([a, b], MergeRecipe("weighted", (1.0, 0.0)))
print("(1,0) merge equals model a:",
      all(torch.equal(first.state_dict()[k], v) for k, v in a.state_dict().items()))
rows = tuple((1.0, 0.0) if spec.kind(j) == "down" else (0.0, 1.0) for j in range(spec.K))
hybrid = merge([a, b], MergeRecipe("mbw", (0.5, 0.5), rows))
print("hybrid block 0 from a:", torch.equal(hybrid.blocks[0].res.conv1.weight, a.blocks[0].res.conv1.weight))

# %% [markdown]
# Gumbel-max sampling follows the softmax of the router logits.

# %%
draws = gumbel_probs(torch.tensor([0.0, 1.0]).expand(10_000, 2),
                     generator=torch.Generator().manual_seed(0)).argmax(-1)
print("P(model 1) ~", draws.float().mean().item(), "vs softmax", torch.softmax(torch.tensor([0.0, 1.0]), 0)[1].item())

# %%
moe = MoeBundle([a, b], router_init(2, spec, "denoiser", seed=0))
data = gen_dataset(64, img_size=8, seed=0, cond_dim=8, n_tokens=2)
train_moe(moe, data, TrainConfig(lr=1e-3, epochs=2, batch_size=16), make_schedule())
x = torch.randn(4, 3, 8, 8)
c = data.conditions[:4]
out = moe_forward(moe, x, c, 300)
for i in range(4):
    picks = [j for j, m in enumerate((a, b)) if torch.allclose(out[i], denoiser_forward(m, x, c, 300)[i], atol=1e-5)]
    print(f"sample {i} routed to model {picks}")
