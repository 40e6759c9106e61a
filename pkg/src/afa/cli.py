"""Command-line entry point: ``afa <command> --config run.json [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import analysis
from .checkpoint import load_checkpoint, save_arrays, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import ConditionedBatch, SceneSpec, encode_conditions, gen_dataset, null_condition, shape_in
from .diffusion import CfgConfig, make_schedule, sample
from .ensemble import EnsembleBundle
from .merging import MergeRecipe, merge
from .moe import MoeBundle, router_init
from .sabw import sabw_init
from .trainer import pretrain_expert, train_moe, train_sabw

COMMANDS = ("gen-data", "pretrain-experts", "train-afa", "train-moe", "merge", "sample",
            "eval", "analyze-wins", "export-attn")


class UsageError(Exception):
    pass


def _jsonl_logger(path: Path):
    fh = open(path, "w")

    def log(record):
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    return log, fh


def _schedule(cfg: RunConfig):
    s = cfg.schedule
    return make_schedule(s.T, s.kind, s.lo, s.hi)


def _slice(cfg: RunConfig, i: int, shapes, n: int, split: str) -> ConditionedBatch:
    offset = 0 if split == "train" else 1000
    return gen_dataset(n, shape_in(*shapes), cfg.spec.img_size, cfg.data.seed + offset + i,
                       cfg.spec.cond_dim, cfg.spec.n_tokens)


def _union(cfg: RunConfig, split: str) -> ConditionedBatch:
    n = cfg.data.n_train if split == "train" else cfg.data.n_val
    return ConditionedBatch.concat([_slice(cfg, i, s, n, split)
                                    for i, s in enumerate(cfg.data.expert_shapes)])


def _experts(cfg: RunConfig):
    if not cfg.paths.experts:
        raise UsageError("paths.experts is empty")
    return [load_checkpoint(p) for p in cfg.paths.experts]


def _model(cfg: RunConfig):
    if not cfg.paths.model:
        raise UsageError("paths.model is not set")
    return load_checkpoint(cfg.paths.model)


def cmd_gen_data(cfg, out):
    for split in ("train", "val"):
        batch = _union(cfg, split)
        save_arrays(out / split, {"images": batch.images.numpy(),
                                  "tokens": batch.conditions.tokens.numpy(),
                                  "null": batch.conditions.null.float().numpy()},
                    kind="dataset", split=split)
        with open(out / f"{split}_scenes.jsonl", "w") as fh:
            for s in batch.scene_specs:
                fh.write(json.dumps(dataclasses.asdict(s)) + "\n")


def cmd_pretrain_experts(cfg, out):
    sched = _schedule(cfg)
    log, fh = _jsonl_logger(out / "train_log.jsonl")
    with fh:
        ancestor = None
        if cfg.data.ancestor_shapes:
            data = _slice(cfg, len(cfg.data.expert_shapes), cfg.data.ancestor_shapes,
                          cfg.data.n_train, "train")
            ancestor = pretrain_expert(data, cfg.spec, cfg.pretrain, sched,
                                       log=lambda r: log({**r, "expert": "ancestor"}))
            save_checkpoint(ancestor, out / "ancestor")
        for i, shapes in enumerate(cfg.data.expert_shapes):
            data = _slice(cfg, i, shapes, cfg.data.n_train, "train")
            tc = dataclasses.replace(cfg.pretrain, seed=cfg.pretrain.seed + i + 1)
            model = pretrain_expert(data, cfg.spec, tc, sched, init=ancestor,
                                    log=lambda r, i=i: log({**r, "expert": i}))
            save_checkpoint(model, out / f"expert_{i}")


def cmd_train_afa(cfg, out):
    experts = _experts(cfg)
    sabw = sabw_init(len(experts), cfg.spec, cfg.sabw.hidden, cfg.seed,
                     heads=cfg.sabw.heads, mlp_ratio=cfg.sabw.mlp_ratio)
    bundle = EnsembleBundle(experts, sabw, cfg.sabw.mode)
    log, fh = _jsonl_logger(out / "train_log.jsonl")
    with fh:
        train_sabw(bundle, _union(cfg, "train"), cfg.train, _schedule(cfg), log)
    save_checkpoint(bundle, out / "afa")


def cmd_train_moe(cfg, out):
    experts = _experts(cfg)
    router = router_init(len(experts), cfg.spec, cfg.moe.level, cfg.moe.hidden, cfg.seed)
    bundle = MoeBundle(experts, router, tau=cfg.moe.tau)
    log, fh = _jsonl_logger(out / "train_log.jsonl")
    with fh:
        train_moe(bundle, _union(cfg, "train"), cfg.train, _schedule(cfg), log)
    save_checkpoint(bundle, out / "moe")


def cmd_merge(cfg, out):
    experts = _experts(cfg)
    m = cfg.merge
    weights = m.global_weights or [1.0] * len(experts)
    recipe = MergeRecipe(m.mode, tuple(weights),
                         tuple(tuple(r) for r in m.block_weights) if m.block_weights else None)
    save_checkpoint(merge(experts, recipe), out / "merged")


def _to_png(img: torch.Tensor, path: Path):
    arr = ((img.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).permute(1, 2, 0).numpy()
    Image.fromarray(arr, mode="RGB").save(path)


def cmd_sample(cfg, out):
    model = _model(cfg)
    s = cfg.sampling
    if s.scenes:
        scenes = [SceneSpec(**d) for d in s.scenes]
    else:
        scenes = [SceneSpec(sh[0], "red", "top-left", "large") for sh in cfg.data.expert_shapes]
    scenes = [sc for sc in scenes for _ in range(s.n)]
    cond = encode_conditions(scenes, cfg.spec.cond_dim, cfg.spec.n_tokens)
    uncond = null_condition(len(scenes), cfg.spec.cond_dim, cfg.spec.n_tokens)
    shape = (len(scenes), cfg.spec.img_channels, cfg.spec.img_size, cfg.spec.img_size)
    if hasattr(model, "set_target"):
        raise UsageError("oracle stubs cannot generate samples")
    imgs = sample(model, cond, uncond, CfgConfig(s.beta_cfg, s.steps), _schedule(cfg),
                  cfg.seed, shape)
    for k, img in enumerate(imgs):
        _to_png(img, out / f"sample_{k:03d}.png")


def cmd_eval(cfg, out):
    model = _model(cfg)
    val = _union(cfg, "val")
    mse = analysis.eval_mse(model, val, _schedule(cfg), cfg.analysis.n_timesteps_sampled, cfg.seed)
    record = {"model": cfg.paths.model, "mse": mse, "n": len(val)}
    analysis.write_jsonl(out / "metrics.jsonl", [record])
    print(json.dumps(record))


def cmd_analyze_wins(cfg, out):
    models = _experts(cfg)
    val = _union(cfg, "val")
    a = cfg.analysis
    idx = a.index
    wm = analysis.win_map(models, val.images[idx:idx + 1], val.conditions[idx:idx + 1], a.t,
                          _schedule(cfg), a.region_size, a.M, cfg.seed)
    caps = {f"capability_{i}": analysis.positional_capability(
        m, val.images[idx:idx + 1], val.conditions[idx:idx + 1], a.t, _schedule(cfg), a.M,
        cfg.seed, i).data for i, m in enumerate(models)}
    save_arrays(out / "winmap", {"wins": wm.data, **caps}, kind="winmap",
                region_size=a.region_size, t=a.t, M=a.M)
    rows = [{"region": [r, c], "wins": wm.data[r, c].tolist()}
            for r in range(wm.data.shape[0]) for c in range(wm.data.shape[1])]
    analysis.write_jsonl(out / "wins.jsonl", rows)


def cmd_export_attn(cfg, out):
    bundle = _model(cfg)
    if not isinstance(bundle, EnsembleBundle):
        raise UsageError("export-attn needs an ensemble checkpoint")
    val = _union(cfg, "val")
    a = cfg.analysis
    idx = a.index
    gen = torch.Generator().manual_seed(cfg.seed)
    x0 = val.images[idx:idx + 1]
    from .diffusion import q_sample
    x_t = q_sample(x0, torch.randn(x0.shape, generator=gen), a.t, _schedule(cfg)).x
    blocks = a.blocks if a.blocks is not None else list(range(bundle.spec.K))
    recs = analysis.export_attention(bundle, x_t, val.conditions[idx:idx + 1], a.t, blocks,
                                     out / "png")
    save_arrays(out / "attention", {f"s{r['sample']}_b{r['block']}_m{r['model']}": r["array"]
                                    for r in recs}, kind="attention", t=a.t)


HANDLERS = {name: globals()["cmd_" + name.replace("-", "_")] for name in COMMANDS}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afa", description="Diffusion model ensembling toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=Path("out"))
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
    except ConfigError as exc:
        print(f"afa: config error: {exc}", file=sys.stderr)
        return 2
    args.out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed)
    try:
        HANDLERS[args.command](cfg, args.out)
    except UsageError as exc:
        print(f"afa: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"afa: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_command())
