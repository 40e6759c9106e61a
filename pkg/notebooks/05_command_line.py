# %% [markdown]
# # The `afa` command
#
# Every stage is also a subcommand driven by one JSON config.  This script
# runs the whole chain with a deliberately tiny configuration.

# %%
import json
from pathlib import Path

from afa.cli import run_command

work = Path("cli_run")
work.mkdir(exist_ok=True)
config = {
    "spec": {"n_down": 2, "n_up": 2, "base_channels": 8, "channel_mults": [1, 2],
             "cond_dim": 8, "img_size": 8, "n_tokens": 2},
    "data": {"n_train": 32, "n_val": 16},
    "pretrain": {"epochs": 2, "batch_size": 16, "lr": 2e-3},
    "train": {"epochs": 1, "batch_size": 8},
    "sampling": {"steps": 10, "n": 1},
    "analysis": {"M": 8},
    "paths": {"experts": [str(work / "experts/expert_0"), str(work / "experts/expert_1")],
              "model": str(work / "afa/afa")},
}
cfg = work / "run.json"
cfg.write_text(json.dumps(config, indent=1))

# %%
for cmd, out in [("gen-data", "data"), ("pretrain-experts", "experts"), ("train-afa", "afa"),
                 ("merge", "merged"), ("eval", "eval"), ("sample", "samples"),
                 ("analyze-wins", "wins"), ("export-attn", "attn")]:
    code = run_command([cmd, "--config", str(cfg), "--out", str(work / out)])
    print(f"afa {cmd:18s} -> exit {code}")

# %%
print((work / "eval/metrics.jsonl").read_text())
print(sorted(p.name for p in (work / "samples").iterdir()))
