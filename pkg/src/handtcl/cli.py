"""Pipeline commands: synth, pretrain, finetune, eval, ablate, audit-sampling, export-embeddings.

Each ``cmd_*`` function takes a resolved :class:`RunConfig`, a seed and an
output directory, writes its artifacts there and returns the path of the
main one. :func:`main` is a thin argparse front end::

    python -m handtcl <command> --config run.json --seed 0 --out results/

Every command first writes ``config.json`` into the output directory with
all defaults filled in. Errors are printed to stderr as one JSON object
``{"error": code, "message": ...}`` and the process exits with status 2
(1 for unexpected internal errors).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .augment import POLICIES, AugmentationPolicy
from .errors import FormatError, HandTCLError, InvalidConfig
from .metrics import evaluate, identity_model
from .nn.autograd import no_grad
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.losses import FineTuneLossWeights
from .nn.model import encode
from .nn.optim import TrainSchedule
from .sampling import audit_distribution
from .synth import SynthConfig, load_dataset, make_dataset
from .train import (
    AblationConfig,
    ContrastiveConfig,
    StageSettings,
    ablation_table,
    default_finetune_schedule,
    finetune,
    pretrain,
    run_ablation,
)

CONFIG_VERSION = 1
COMMANDS = ("synth", "pretrain", "finetune", "eval", "ablate", "audit-sampling", "export-embeddings")


def _policy(value):
    if isinstance(value, str):
        if value not in POLICIES:
            raise InvalidConfig(f"unknown augmentation policy {value!r}; choose from {sorted(POLICIES)}")
        return POLICIES[value]
    return AugmentationPolicy.from_dict(value)


def _policy_dict(value):
    return value if isinstance(value, str) else _policy(value).to_dict()


def _build(cls, d, what):
    try:
        return cls(**d)
    except TypeError as exc:
        raise InvalidConfig(f"{what}: {exc}") from None


@dataclass
class AuditConfig:
    strategies: tuple = ("linear", "exponential", "tanh")
    radii: tuple = (5, 15)
    n_draws: int = 1_000_000


@dataclass
class RunConfig:
    """The single JSON document every command reads."""

    synth: SynthConfig = field(default_factory=SynthConfig)
    n_sequences: int = 200
    datasets: dict = field(default_factory=lambda: {"train": [], "test": []})
    checkpoint: str | None = None
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    augment: dict = field(default_factory=lambda: {"pretrain": "pretrain", "finetune": "finetune"})
    loss_weights: FineTuneLossWeights = field(default_factory=FineTuneLossWeights)
    pretrain_schedule: TrainSchedule = field(default_factory=TrainSchedule)
    finetune_schedule: TrainSchedule = field(default_factory=default_finetune_schedule)
    n_labeled: int | None = None
    ablation: AblationConfig = field(default_factory=AblationConfig)
    audit: AuditConfig = field(default_factory=AuditConfig)
    eval_model: str = "checkpoint"  # or "identity": predicts the ground truth (test hook)
    embedding_batch: int = 256

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("version", None)
        if version != CONFIG_VERSION:
            raise InvalidConfig(f"config version must be {CONFIG_VERSION}, got {version!r}")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        if "synth" in d:
            d["synth"] = SynthConfig.from_dict(d["synth"])
        if "contrastive" in d:
            d["contrastive"] = ContrastiveConfig.from_dict(d["contrastive"])
        if "loss_weights" in d:
            d["loss_weights"] = _build(FineTuneLossWeights, d["loss_weights"], "loss_weights")
        for key in ("pretrain_schedule", "finetune_schedule"):
            if key in d:
                d[key] = _build(TrainSchedule, d[key], key)
        if "ablation" in d:
            d["ablation"] = AblationConfig.from_dict(d["ablation"])
        if "audit" in d:
            d["audit"] = _build(AuditConfig, d["audit"], "audit")
        if "datasets" in d:
            ds = {"train": [], "test": []}
            ds.update(d["datasets"])
            d["datasets"] = {k: [v] if isinstance(v, str) else list(v) for k, v in ds.items()}
        if "augment" in d:
            aug = {"pretrain": "pretrain", "finetune": "finetune"}
            aug.update(d["augment"])
            d["augment"] = aug
        cfg = cls(**d)
        for stage in ("pretrain", "finetune"):
            _policy(cfg.augment[stage])
        if cfg.eval_model not in ("checkpoint", "identity"):
            raise InvalidConfig("eval_model must be 'checkpoint' or 'identity'")
        return cfg

    def to_dict(self):
        return {
            "version": CONFIG_VERSION,
            "synth": self.synth.to_dict(),
            "n_sequences": self.n_sequences,
            "datasets": self.datasets,
            "checkpoint": self.checkpoint,
            "contrastive": self.contrastive.to_dict(),
            "augment": {k: _policy_dict(v) for k, v in self.augment.items()},
            "loss_weights": asdict(self.loss_weights),
            "pretrain_schedule": asdict(self.pretrain_schedule),
            "finetune_schedule": asdict(self.finetune_schedule),
            "n_labeled": self.n_labeled,
            "ablation": self.ablation.to_dict(),
            "audit": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.audit).items()},
            "eval_model": self.eval_model,
            "embedding_batch": self.embedding_batch,
        }

    def settings(self):
        return StageSettings(
            ccfg=self.contrastive,
            pretrain_schedule=self.pretrain_schedule,
            finetune_schedule=self.finetune_schedule,
            weights=self.loss_weights,
            pretrain_policy=_policy(self.augment["pretrain"]),
            finetune_policy=_policy(self.augment["finetune"]),
        )


def load_config(path):
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return RunConfig.from_dict(data)


# -- helpers ---------------------------------------------------------------


def _prepare(out, cfg: RunConfig, command, seed):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": command, "seed": int(seed), "handtcl_version": __version__, "config": cfg.to_dict()}
    (out / "config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True))
    return out, snapshot


def _datasets(cfg: RunConfig, role):
    paths = cfg.datasets.get(role) or []
    if not paths:
        raise InvalidConfig(f"config.datasets.{role} lists no dataset directories")
    return [load_dataset(p) for p in paths]


def _checkpoint(cfg: RunConfig, required):
    if cfg.checkpoint is None:
        if required:
            raise InvalidConfig("this command needs a checkpoint (--checkpoint or config.checkpoint)")
        return None
    return load_checkpoint(cfg.checkpoint)[0]


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _history_csv(path, history, keys):
    _write_rows(path, ["epoch", *keys], [[h["epoch"], *(repr(h[k]) for k in keys)] for h in history])


# -- commands --------------------------------------------------------------


def cmd_synth(cfg: RunConfig, seed, out):
    """Write ``cfg.n_sequences`` sequences into ``<out>/dataset``."""
    out, _ = _prepare(out, cfg, "synth", seed)
    return make_dataset(out / "dataset", cfg.n_sequences, cfg.synth, seed)


def cmd_pretrain(cfg: RunConfig, seed, out):
    """Contrastive pre-training on the train datasets; writes the checkpoint and a loss curve."""
    out, snapshot = _prepare(out, cfg, "pretrain", seed)
    settings = cfg.settings()
    params, history = pretrain(
        _datasets(cfg, "train"), settings.ccfg, settings.pretrain_schedule, seed=seed, policy=settings.pretrain_policy
    )
    _history_csv(out / "pretrain_loss.csv", history, ["loss", "lr"])
    save_checkpoint(out / "pretrain.ckpt", params, snapshot)
    return out / "pretrain.ckpt"


def cmd_finetune(cfg: RunConfig, seed, out):
    """Supervised fine-tuning; starts from ``cfg.checkpoint`` or a fresh encoder."""
    out, snapshot = _prepare(out, cfg, "finetune", seed)
    settings = cfg.settings()
    train = _datasets(cfg, "train")
    seqs = [s for d in train for s in d.sequences]
    if cfg.n_labeled is not None:
        seqs = seqs[: cfg.n_labeled]
    params, history = finetune(
        _checkpoint(cfg, required=False),
        seqs,
        settings.weights,
        settings.finetune_schedule,
        seed=seed,
        policy=settings.finetune_policy,
        tmpl=train[0].template,
    )
    _history_csv(out / "finetune_loss.csv", history, ["loss", "l2d", "l3d", "ltheta", "lr"])
    save_checkpoint(out / "finetune.ckpt", params, snapshot)
    return out / "finetune.ckpt"


def cmd_eval(cfg: RunConfig, seed, out):
    """Metrics on the test datasets as ``metrics.json`` and ``metrics.csv``."""
    out, _ = _prepare(out, cfg, "eval", seed)
    test = _datasets(cfg, "test")
    model = identity_model if cfg.eval_model == "identity" else _checkpoint(cfg, required=True)
    report = evaluate(model, [s for d in test for s in d.sequences], test[0].template)
    report.to_json(out / "metrics.json")
    report.to_csv(out / "metrics.csv")
    return out / "metrics.json"


def cmd_ablate(cfg: RunConfig, seed, out):
    """Every arm over every seed; ``ablation.json`` plus a median table ``ablation.csv``.

    Seeds come from ``cfg.ablation.seeds``, offset by ``seed``.
    """
    out, _ = _prepare(out, cfg, "ablate", seed)
    ab = cfg.ablation
    config = AblationConfig(
        seeds=tuple(int(seed) + s for s in ab.seeds),
        arms=ab.arms,
        n_labeled=cfg.n_labeled if ab.n_labeled is None else ab.n_labeled,
        workers=ab.workers,
    )
    train = _datasets(cfg, "train")
    test = _datasets(cfg, "test")
    result = run_ablation(train if len(train) > 1 else train[0], test, cfg.settings(), config)
    (out / "ablation.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    _write_rows(
        out / "ablation.csv",
        ["arm", "median_accel_mm_s2", "median_ra_epe_mm", "median_pa_epe_mm"],
        [[row[0], *(repr(v) for v in row[1:])] for row in ablation_table(result)],
    )
    return out / "ablation.csv"


def cmd_audit_sampling(cfg: RunConfig, seed, out):
    """Analytic vs empirical pair-sampling distributions, one CSV per (strategy, k).

    Rows with ``|distance| <= k`` describe positives, the rest negatives.
    """
    out, _ = _prepare(out, cfg, "audit-sampling", seed)
    rng = np.random.default_rng(seed)
    written = []
    for strategy in cfg.audit.strategies:
        for k in cfg.audit.radii:
            res = audit_distribution(strategy, int(k), n_draws=int(cfg.audit.n_draws), rng=rng)
            path = out / f"audit_{strategy}_k{int(k)}.csv"
            _write_rows(
                path,
                ["distance", "analytic_p", "empirical_p"],
                [[int(d), repr(float(a)), repr(float(e))] for d, a, e in zip(res["distance"], res["analytic_p"], res["empirical_p"])],
            )
            written.append(path)
    return written


def cmd_export_embeddings(cfg: RunConfig, seed, out):
    """Encoder outputs for every test frame: ``seq_id, frame_index, e0..e{E-1}``."""
    out, _ = _prepare(out, cfg, "export-embeddings", seed)
    params = _checkpoint(cfg, required=True)
    test = _datasets(cfg, "test")
    e = params.config.embed_dim
    path = out / "embeddings.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seq_id", "frame_index", *(f"e{i}" for i in range(e))])
        for d in test:
            for seq in d.sequences:
                with no_grad():
                    z = np.concatenate(
                        [encode(params, seq.frames[i : i + cfg.embedding_batch]).data for i in range(0, len(seq), cfg.embedding_batch)]
                    )
                for t, row in enumerate(z):
                    w.writerow([seq.seq_id, t, *(repr(float(v)) for v in row)])
    return path


HANDLERS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "audit-sampling": cmd_audit_sampling,
    "export-embeddings": cmd_export_embeddings,
}


# -- entry point -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidConfig(f"usage: {message}")


def _parser():
    p = _Parser(prog="python -m handtcl", description="Time-coherent contrastive hand pose pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default=None, help="JSON run config (defaults when omitted)")
    p.add_argument("--seed", required=True, type=int, help="unsigned 64-bit seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoint", default=None, help="overrides config.checkpoint")
    return p


def main(argv=None, stderr=None):
    """Run one command; returns the process exit status."""
    stderr = stderr or sys.stderr
    try:
        args = _parser().parse_args(argv)
        if not 0 <= args.seed < 2**64:
            raise InvalidConfig("seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config)
        if args.checkpoint is not None:
            cfg.checkpoint = args.checkpoint
        HANDLERS[args.command](cfg, args.seed, args.out)
        return 0
    except HandTCLError as exc:
        stderr.write(json.dumps({"error": exc.code, "message": str(exc)}) + "\n")
        return 2
    except OSError as exc:
        stderr.write(json.dumps({"error": "io_error", "message": str(exc)}) + "\n")
        return 2
    except Exception as exc:  # keep the error stream machine-readable
        stderr.write(json.dumps({"error": "internal", "message": f"{type(exc).__name__}: {exc}"}) + "\n")
        return 1
