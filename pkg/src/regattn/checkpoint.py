"""Versioned checkpoint archives.

A checkpoint is an uncompressed ``.npz`` whose ``__header__`` entry holds UTF-8
JSON (format version, config and its hash, stage, iteration, lambda state,
RNG states). Every other entry is one little-endian array: float tensors as
``<f4``, integer buffers as ``<i8``. Keys are ``<NETWORK>/<parameter path>``,
``optim/DISC/<param index>/<field>``, ``buffer/<slot>`` and ``rng/torch``.
"""

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, InputError

FORMAT_VERSION = 1
HEADER_KEY = "__header__"


def _to_array(t):
    t = t.detach().cpu()
    if t.is_floating_point():
        return t.numpy().astype("<f4")
    return t.numpy().astype("<i8")


def _module_arrays(prefix, module):
    return {f"{prefix}/{k}": _to_array(v) for k, v in module.state_dict().items()}


def write_archive(path, header, arrays):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **{HEADER_KEY: blob}, **arrays)
    return path


def read_archive(path):
    """Return ``(header dict, {key: ndarray})``."""
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    if HEADER_KEY not in arrays:
        raise InputError(f"{path} has no checkpoint header")
    header = json.loads(arrays.pop(HEADER_KEY).tobytes().decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint format {header.get('format_version')}")
    return header, arrays


def load_module(module, prefix, arrays):
    own = module.state_dict()
    state = {}
    for k, v in own.items():
        key = f"{prefix}/{k}"
        if key not in arrays:
            raise ConfigError(f"checkpoint lacks {key}")
        a = arrays[key]
        if tuple(a.shape) != tuple(v.shape):
            raise ConfigError(f"checkpoint {key} has shape {a.shape}, model expects {tuple(v.shape)}")
        state[k] = torch.from_numpy(np.ascontiguousarray(a)).to(v.dtype)
    module.load_state_dict(state)


def _optimizer_arrays(prefix, opt):
    sd = opt.state_dict()
    arrays = {}
    for pid, st in sd["state"].items():
        for field, value in st.items():
            arrays[f"{prefix}/{pid}/{field}"] = _to_array(torch.as_tensor(value))
    return arrays, sd["param_groups"]


def _load_optimizer(opt, prefix, arrays, groups):
    state = {}
    for key, arr in arrays.items():
        if not key.startswith(prefix + "/"):
            continue
        _, _, pid, field = key.split("/", 3)
        t = torch.from_numpy(np.ascontiguousarray(arr))
        state.setdefault(int(pid), {})[field] = t.float() if field == "step" else t
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_trainer(trainer, path):
    arrays = {}
    arrays.update(_module_arrays("G0", trainer.g0))
    arrays.update(_module_arrays("GATTN", trainer.attn))
    arrays.update(_module_arrays("DISC", trainer.disc))
    opt_arrays, groups = _optimizer_arrays("optim/DISC", trainer.opt_d)
    arrays.update(opt_arrays)
    for i, img in enumerate(trainer.buffer.pool):
        arrays[f"buffer/{i:03d}"] = _to_array(img)
    arrays["rng/torch"] = torch.get_rng_state().numpy().astype(np.uint8)
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": trainer.config_hash,
        "config": trainer.cfg,
        "stage": trainer.stage.value if trainer.stage else None,
        "stages_run": [s.value for s in trainer.stages_run],
        "iteration": trainer.iteration,
        "stage_iter": trainer.stage_iter,
        "lambda_state": asdict(trainer.lam_state),
        "rng": {
            "x": trainer.rng_x.bit_generator.state,
            "y": trainer.rng_y.bit_generator.state,
            "buffer": trainer.buffer.rng.bit_generator.state,
        },
        "buffer": {"pushes": trainer.buffer.pushes, "swaps": trainer.buffer.swaps,
                   "size": len(trainer.buffer.pool)},
        "optim_d_param_groups": groups,
        "parameter_keys": {net: [k for k in arrays if k.startswith(net + "/")]
                           for net in ("G0", "GATTN", "DISC")},
    }
    return write_archive(path, header, arrays)


def restore_trainer(trainer, path):
    from .training import AdaptiveLambdaState, TrainStage

    header, arrays = read_archive(path)
    if header["config_hash"] != trainer.config_hash:
        raise ConfigError(
            f"checkpoint {path} was written by config {header['config_hash']}, "
            f"current config is {trainer.config_hash}; refusing to resume"
        )
    load_module(trainer.g0, "G0", arrays)
    load_module(trainer.attn, "GATTN", arrays)
    load_module(trainer.disc, "DISC", arrays)
    _load_optimizer(trainer.opt_d, "optim/DISC", arrays, header["optim_d_param_groups"])
    n = header["buffer"]["size"]
    trainer.buffer.pool = [torch.from_numpy(arrays[f"buffer/{i:03d}"].copy()) for i in range(n)]
    trainer.buffer.pushes = header["buffer"]["pushes"]
    trainer.buffer.swaps = header["buffer"]["swaps"]
    trainer.rng_x.bit_generator.state = header["rng"]["x"]
    trainer.rng_y.bit_generator.state = header["rng"]["y"]
    trainer.buffer.rng.bit_generator.state = header["rng"]["buffer"]
    torch.set_rng_state(torch.from_numpy(arrays["rng/torch"].copy()))
    trainer.stages_run = [TrainStage(s) for s in header["stages_run"]]
    trainer.stage = TrainStage(header["stage"]) if header["stage"] else None
    trainer.iteration = header["iteration"]
    trainer.stage_iter = header["stage_iter"]
    trainer.lam_state = AdaptiveLambdaState(**header["lambda_state"])
    return header


def load_translator(path):
    """Rebuild ``(g0, attn, stage, header)`` from a checkpoint, in eval mode.

    The attention branch is constructed without downloading anything: its
    weights, pretrained or not, come from the archive.
    """
    from .models import AttentionBranch, Generator
    from .training import TrainStage

    header, arrays = read_archive(path)
    m = header["config"]["model"]
    g0 = Generator(m["ngf"], m["n_res_blocks"], m["dilation"])
    attn = AttentionBranch(m["vgg_width"], pretrained=False)
    load_module(g0, "G0", arrays)
    load_module(attn, "GATTN", arrays)
    g0.eval()
    attn.eval()
    return g0, attn, TrainStage(header["stage"]), header
