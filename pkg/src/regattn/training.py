"""Staged adversarial training with adaptive regularization weight.

Stages run in a fixed order: the vanilla generator alone, then the attention
branch with G0 frozen, then both at a reduced learning rate. Within the first
two stages lambda is grown from zero until the (smoothed) generator
adversarial loss crosses a threshold, then held.
"""

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import config_hash, validate
from .data import DomainDataset, load_batch
from .errors import ConfigError, InputError, NumericalError
from .losses import d_loss, total_g_loss
from .models import AttentionBranch, Discriminator, FeatureExtractor, Generator, composite, init_weights

log = logging.getLogger(__name__)


class TrainStage(str, enum.Enum):
    G0_ONLY = "G0_ONLY"
    ATTN_ONLY = "ATTN_ONLY"
    JOINT = "JOINT"


STAGE_ORDER = (TrainStage.G0_ONLY, TrainStage.ATTN_ONLY, TrainStage.JOINT)


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 2e-4
    decay_start: int = 5000
    total_iters: int = 10000
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.decay_start <= self.total_iters:
            raise ConfigError(
                f"need 0 < decay_start <= total_iters, got {self.decay_start}, {self.total_iters}"
            )


def lr_at(cfg, iteration):
    """Constant ``base_lr`` before ``decay_start``, then linear to 0 at ``total_iters``."""
    if not 0 <= iteration <= cfg.total_iters:
        raise InputError(f"iteration {iteration} outside [0, {cfg.total_iters}]")
    if iteration < cfg.decay_start:
        return cfg.base_lr
    span = cfg.total_iters - cfg.decay_start
    if span == 0:
        return 0.0
    return cfg.base_lr * (cfg.total_iters - iteration) / span


@dataclass(frozen=True)
class AdaptiveLambdaState:
    """State of the lambda induction.

    ``lam`` is always ``step_size * increments``. Freezing is absorbing.
    ``warmup`` suppresses the freeze test for the first calls only; lambda
    still grows during it.
    """

    threshold: float = 1.2 * math.log(2.0)
    step_size: float = 0.1
    interval: int = 100
    ema_decay: float = 0.99
    warmup: int = 0
    lam: float = 0.0
    increments: int = 0
    frozen: bool = False
    adv_ema: float = float("nan")
    step: int = 0


def lambda_state_from_config(cfg):
    lc = cfg["lambda"]
    return AdaptiveLambdaState(threshold=lc["threshold"], step_size=lc["step_size"],
                               interval=lc["interval"], ema_decay=lc["ema_decay"],
                               warmup=lc["warmup"])


def lambda_step(state, current_adv):
    """Advance the induction by one training iteration.

    The EMA starts at the first observed loss. If not frozen: lambda grows by
    ``step_size`` every ``interval`` calls, then the state freezes once the EMA
    exceeds ``threshold`` (after warmup).
    """
    step = state.step + 1
    if state.step == 0:
        ema = float(current_adv)
    else:
        ema = state.ema_decay * state.adv_ema + (1.0 - state.ema_decay) * float(current_adv)
    increments, frozen = state.increments, state.frozen
    if not frozen:
        if step % state.interval == 0:
            increments += 1
        if step > state.warmup and ema > state.threshold:
            frozen = True
    return replace(state, step=step, adv_ema=ema, increments=increments,
                   lam=state.step_size * increments, frozen=frozen)


class HistoryBuffer:
    """Pool of previously generated images fed to the discriminator.

    Until full every image is stored and returned. Afterwards each image is
    returned as-is with probability 0.5, or swapped for a uniformly chosen
    stored image which it then replaces.
    """

    def __init__(self, capacity=50, seed=None):
        self.capacity = capacity
        self.pool = []
        self.rng = np.random.default_rng(seed)
        self.pushes = 0
        self.swaps = 0

    def __len__(self):
        return len(self.pool)

    def push_sample(self, img):
        self.pushes += 1
        if self.capacity == 0:
            return img
        if len(self.pool) < self.capacity:
            self.pool.append(img.clone())
            return img
        if self.rng.random() < 0.5:
            return img
        j = int(self.rng.integers(0, self.capacity))
        self.swaps += 1
        old = self.pool[j]
        self.pool[j] = img.clone()
        return old

    def query(self, batch):
        return torch.stack([self.push_sample(img) for img in batch])


def _set_trainable(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


def _state_fingerprint(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


class Trainer:
    """Owns the networks, optimizers, history buffer, RNG streams and lambda state."""

    def __init__(self, cfg, out_dir=None):
        self.cfg = cfg
        self.config_hash = config_hash(cfg)
        self.out_dir = Path(out_dir if out_dir is not None else cfg["output_dir"])
        seed = cfg["seed"]
        torch.manual_seed(seed)
        m = cfg["model"]
        self.g0 = Generator(m["ngf"], m["n_res_blocks"], m["dilation"])
        self.attn = AttentionBranch(m["vgg_width"], m["pretrained"], m.get("weights_dir"))
        self.disc = Discriminator(m["ndf"])
        self.extractor = FeatureExtractor(cfg["loss"]["reg_layers"], m["vgg_width"],
                                          m["pretrained"], m.get("weights_dir"))
        self.reg_weights = tuple(cfg["loss"]["reg_weights"])
        seq_x, seq_y, seq_buf = np.random.SeedSequence(seed).spawn(3)
        self.rng_x = np.random.default_rng(seq_x)
        self.rng_y = np.random.default_rng(seq_y)
        self.buffer = HistoryBuffer(cfg["schedule"]["buffer_size"], seq_buf)
        self.opt_d = self._adam(self.disc.parameters(), cfg["optim"]["base_lr"])
        self.opt_g = None
        self.opt_cfg = None
        self.stage = None
        self.stage_iter = 0
        self.iteration = 0
        self.lam_state = lambda_state_from_config(cfg)
        self.stages_run = []
        self.rows = []

    def _adam(self, params, lr):
        o = self.cfg["optim"]
        return torch.optim.Adam(params, lr=lr, betas=(o["beta1"], o["beta2"]), eps=o["eps"])

    def stage_length(self, stage):
        s = self.cfg["schedule"]
        return {TrainStage.G0_ONLY: s["g0_iters"], TrainStage.ATTN_ONLY: s["attn_iters"],
                TrainStage.JOINT: s["joint_iters"]}[TrainStage(stage)]

    def stage_optimizer_config(self, stage):
        o = self.cfg["optim"]
        n = self.stage_length(stage)
        scale = o["joint_lr_scale"] if stage == TrainStage.JOINT else 1.0
        decay_start = min(n, max(1, round(o["decay_start_fraction"] * n)))
        return OptimizerConfig(base_lr=o["base_lr"] * scale, decay_start=decay_start,
                               total_iters=n, beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])

    def begin_stage(self, stage):
        stage = TrainStage(stage)
        expected = STAGE_ORDER[len(self.stages_run)] if len(self.stages_run) < 3 else None
        if stage != expected:
            raise ConfigError(f"stage {stage.value} cannot follow {[s.value for s in self.stages_run]}")
        self.stage = stage
        self.stage_iter = 0
        train_g0 = stage in (TrainStage.G0_ONLY, TrainStage.JOINT)
        train_attn = stage in (TrainStage.ATTN_ONLY, TrainStage.JOINT)
        _set_trainable(self.g0, train_g0)
        _set_trainable(self.attn, train_attn)
        # a frozen G0 runs with running batch statistics so nothing in it moves
        self.g0.train(train_g0)
        self.attn.train(train_attn)
        params = (list(self.g0.parameters()) if train_g0 else []) + \
                 (list(self.attn.parameters()) if train_attn else [])
        self.opt_cfg = self.stage_optimizer_config(stage)
        self.opt_g = self._adam(params, self.opt_cfg.base_lr)
        if self.cfg["schedule"]["reset_d_per_stage"] and stage != TrainStage.G0_ONLY:
            init_weights(self.disc)
            self.opt_d = self._adam(self.disc.parameters(), self.opt_cfg.base_lr)
        if stage == TrainStage.JOINT:
            self.lam_state = replace(self.lam_state, frozen=True)
        else:
            self.lam_state = lambda_state_from_config(self.cfg)
        self.stages_run.append(stage)
        log.info("stage %s: %d iterations, lr %.2e", stage.value, self.opt_cfg.total_iters,
                 self.opt_cfg.base_lr)

    def translate(self, x, stage=None):
        """Return ``(final, g0_out, attention or None)`` for the given stage semantics."""
        stage = TrainStage(stage or self.stage or TrainStage.JOINT)
        g0_out = self.g0(x)
        if stage == TrainStage.G0_ONLY:
            return g0_out, g0_out, None
        a = self.attn(x)
        return composite(x, g0_out, a), g0_out, a

    def _abort(self, message, extra):
        dump = {
            "message": message,
            "stage": self.stage.value if self.stage else None,
            "iteration": self.iteration,
            "stage_iter": self.stage_iter,
            "lambda_state": asdict(self.lam_state),
            "config_hash": self.config_hash,
            "losses": extra,
            "recent_rows": self.rows[-20:],
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "nan_dump.json"
        path.write_text(json.dumps(dump, indent=2, default=str))
        raise NumericalError(f"{message} (state dumped to {path})", dump_path=path)

    def train_step(self, x, y):
        """One generator update followed by one discriminator update.

        Returns the generator's :class:`LossBreakdown`; the full row (with the
        discriminator loss and learning rate) is appended to ``self.rows``.
        """
        if self.stage is None:
            raise ConfigError("call begin_stage() before train_step()")
        lr = lr_at(self.opt_cfg, self.stage_iter)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

        _set_trainable(self.disc, False)
        if self.stage == TrainStage.ATTN_ONLY:
            with torch.no_grad():
                g0_out = self.g0(x)
        else:
            g0_out = self.g0(x)
        if self.stage == TrainStage.G0_ONLY:
            final = g0_out
        else:
            final = composite(x, g0_out, self.attn(x))
        with torch.no_grad():
            x_feats = self.extractor(x)
        total, br = total_g_loss(self.disc(final), x, final, self.lam_state.lam, self.extractor,
                                 self.reg_weights, x_feats)
        if not all(math.isfinite(v) for v in (br.adv, br.reg, br.total)):
            self._abort("non-finite generator loss", br.as_dict())
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()

        _set_trainable(self.disc, True)
        fake = self.buffer.query(final.detach())
        ld = d_loss(self.disc(y), self.disc(fake))
        if not torch.isfinite(ld):
            self._abort("non-finite discriminator loss", {**br.as_dict(), "d_loss": float(ld.detach())})
        self.opt_d.zero_grad(set_to_none=True)
        ld.backward()
        self.opt_d.step()

        self.lam_state = lambda_step(self.lam_state, br.adv)
        self.rows.append({
            "iteration": self.iteration,
            "stage": self.stage.value,
            "stage_iter": self.stage_iter,
            "lr": lr,
            "lambda": br.lam,
            "adv": br.adv,
            "reg": br.reg,
            "total": br.total,
            "d_loss": float(ld.detach()),
            "adv_ema": self.lam_state.adv_ema,
            "lambda_frozen": self.lam_state.frozen,
        })
        self.iteration += 1
        self.stage_iter += 1
        return br

    # checkpoints -----------------------------------------------------------

    def save_checkpoint(self, path):
        return ckpt.save_trainer(self, path)

    def load_checkpoint(self, path):
        ckpt.restore_trainer(self, path)

    def fingerprints(self):
        return {"G0": _state_fingerprint(self.g0), "GATTN": _state_fingerprint(self.attn),
                "DISC": _state_fingerprint(self.disc)}

    def manifest(self, checkpoints=()):
        return {
            "format_version": ckpt.FORMAT_VERSION,
            "config_hash": self.config_hash,
            "config": self.cfg,
            "stages": [s.value for s in self.stages_run],
            "checkpoints": [str(p) for p in checkpoints],
            "rows": self.rows,
        }


def _write_manifest(trainer, path, checkpoints):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(trainer.manifest(checkpoints), indent=1))


def checkpoint_name(stage_index, stage):
    return f"stage{stage_index + 1}_{TrainStage(stage).value}.npz"


def run_schedule(cfg, out_dir=None, resume=None, stop_after=None, progress=None, on_sample=None):
    """Run the three stages, checkpointing at each boundary. Returns the :class:`Trainer`.

    ``resume`` is a stage-boundary checkpoint from a run with the same config
    hash; training continues with the following stage. ``stop_after`` ends the
    run early after the named stage. ``progress(trainer)`` is called after
    every step.
    """
    validate(cfg)
    out = Path(out_dir if out_dir is not None else cfg["output_dir"])
    trainer = Trainer(cfg, out)
    d = cfg["data"]
    ds_x = DomainDataset(d["x_dir"], "X", d["image_size"])
    ds_y = DomainDataset(d["y_dir"], "Y", d["image_size"])
    manifest_path = out / "manifest.json"
    checkpoints = []
    if resume is not None:
        trainer.load_checkpoint(resume)
        if manifest_path.is_file():
            old = json.loads(manifest_path.read_text())
            if old.get("config_hash") == trainer.config_hash:
                trainer.rows = [r for r in old["rows"] if r["iteration"] < trainer.iteration]
                checkpoints = [c for c in old["checkpoints"]][: len(trainer.stages_run)]
    sample_every = cfg["schedule"]["sample_every"]
    fixed_x = None
    if sample_every:
        fixed_x = ds_x.load_all()[:4]
    bs = d["batch_size"]
    for i, stage in enumerate(STAGE_ORDER):
        if stage in trainer.stages_run:
            continue
        trainer.begin_stage(stage)
        for _ in range(trainer.stage_length(stage)):
            x = load_batch(ds_x, bs, trainer.rng_x)
            y = load_batch(ds_y, bs, trainer.rng_y)
            trainer.train_step(x, y)
            if progress is not None:
                progress(trainer)
            if sample_every and trainer.stage_iter % sample_every == 0:
                _write_samples(trainer, fixed_x, out)
        path = trainer.save_checkpoint(out / "checkpoints" / checkpoint_name(i, stage))
        checkpoints.append(path)
        _write_manifest(trainer, manifest_path, checkpoints)
        if stop_after is not None and stage == TrainStage(stop_after):
            break
    return trainer


def _write_samples(trainer, x, out):
    from .evaluation import export_grid

    was = (trainer.g0.training, trainer.attn.training)
    trainer.g0.eval()
    trainer.attn.eval()
    with torch.no_grad():
        final, g0_out, a = trainer.translate(x)
    trainer.g0.train(was[0])
    trainer.attn.train(was[1])
    if a is None:
        a = torch.ones_like(x[:, :1])
    name = f"{trainer.stage.value}_{trainer.stage_iter:06d}.png"
    export_grid(x, g0_out, a, final, out / "samples" / name)
