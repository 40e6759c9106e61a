"""Named-array archives: a JSON manifest plus one little-endian float32 payload.

An archive is a directory holding ``manifest.json`` and ``payload.bin``.  The
manifest lists every array with its shape and byte offset; arrays are
concatenated in manifest order.  Model checkpoints are archives whose
manifest also records what to rebuild (``kind``, spec, ensemble config).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError, ParameterError, VersionError

FORMAT = "afa-archive"
VERSION = 1
_DTYPE = np.dtype("<f4")


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], kind: str = "arrays",
                **header) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, offset = [], 0
    with open(path / "payload.bin", "wb") as fh:
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype=_DTYPE)
            fh.write(a.tobytes())
            index.append({"name": name, "shape": list(a.shape), "dtype": "float32", "offset": offset})
            offset += a.nbytes
    manifest = {"format": FORMAT, "version": VERSION, "kind": kind, **header, "tensors": index}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable manifest in {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise IntegrityError(f"{path} is not an {FORMAT}")
    if manifest.get("version") != VERSION:
        raise VersionError(f"unsupported archive version {manifest.get('version')!r}")
    return manifest


def load_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest = read_manifest(path)
    raw = (path / "payload.bin").read_bytes()
    names = [t["name"] for t in manifest["tensors"]]
    if len(set(names)) != len(names):
        raise IntegrityError("duplicate array names in manifest")
    arrays, offset = {}, 0
    for entry in manifest["tensors"]:
        if entry.get("dtype") != "float32":
            raise IntegrityError(f"unsupported dtype for {entry['name']}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] != offset:
            raise IntegrityError(f"offset of {entry['name']} disagrees with preceding shapes")
        end = offset + count * _DTYPE.itemsize
        if end > len(raw):
            raise IntegrityError(f"payload too short for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, _DTYPE, count, offset).reshape(entry["shape"]).copy()
        offset = end
    if offset != len(raw):
        raise IntegrityError(f"payload has {len(raw)} bytes, manifest describes {offset}")
    return manifest, arrays


def _state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().float().numpy() for k, v in module.state_dict().items()}


def save_checkpoint(params, path: str | Path) -> Path:
    """Persist a denoiser, ensemble bundle, MoE bundle or oracle stub."""
    from .diffusion import PerfectEpsOracle
    from .ensemble import EnsembleBundle
    from .moe import MoeBundle
    from .unet import ToyUNet

    if isinstance(params, ToyUNet):
        return save_arrays(path, _state_arrays(params), "denoiser", spec=params.spec.to_dict())
    if isinstance(params, EnsembleBundle):
        return save_arrays(path, _state_arrays(params), "ensemble", spec=params.spec.to_dict(),
                           N=params.N, mode=params.mode, sabw=params.sabw.config())
    if isinstance(params, MoeBundle):
        return save_arrays(path, _state_arrays(params), "moe", spec=params.spec.to_dict(),
                           N=params.N, tau=params.tau, router=params.router.config())
    if isinstance(params, PerfectEpsOracle):
        return save_arrays(path, {}, "oracle", alpha_bar=params.sched.alpha_bar.tolist())
    raise ParameterError(f"cannot checkpoint {type(params).__name__}")


def load_checkpoint(path: str | Path):
    from .diffusion import NoiseSchedule, PerfectEpsOracle
    from .ensemble import EnsembleBundle
    from .moe import MoeBundle, Router
    from .sabw import Sabw
    from .unet import DenoiserSpec, ToyUNet

    manifest, arrays = load_arrays(path)
    kind = manifest["kind"]
    if kind == "oracle":
        return PerfectEpsOracle(NoiseSchedule(np.asarray(manifest["alpha_bar"])))
    if kind not in ("denoiser", "ensemble", "moe"):
        raise IntegrityError(f"archive kind {kind!r} is not a model")
    spec = DenoiserSpec(**manifest["spec"])
    if kind == "denoiser":
        obj = ToyUNet(spec)
    elif kind == "ensemble":
        n = manifest["N"]
        cfg = dict(manifest["sabw"])
        cfg.pop("n_models", None)
        obj = EnsembleBundle([ToyUNet(spec) for _ in range(n)], Sabw(n, spec, **cfg),
                             manifest["mode"])
    else:
        n = manifest["N"]
        rcfg = manifest["router"]
        obj = MoeBundle([ToyUNet(spec) for _ in range(n)],
                        Router(n, spec, rcfg["level"], rcfg["hidden"]), tau=manifest["tau"])
    state = obj.state_dict()
    if set(state) != set(arrays):
        raise IntegrityError("checkpoint tensors do not match the declared architecture")
    for name, ref in state.items():
        if tuple(ref.shape) != arrays[name].shape:
            raise IntegrityError(f"shape of {name} disagrees with the architecture")
    obj.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    for p in obj.parameters():
        p.requires_grad_(False)
    return obj
