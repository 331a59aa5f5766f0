"""Contrastive pre-training, supervised fine-tuning and the ablation arms.

Every loop draws all of its randomness from one ``numpy.random.Generator``
seeded by the caller, and gradients are reduced in a fixed order, so two
runs with the same seed produce bit-identical parameters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from . import augment
from .augment import FINETUNE_POLICY, PRETRAIN_POLICY, AugmentationPolicy
from .errors import EmptyBatch, InvalidConfig
from .hand import default_template
from .nn.losses import FineTuneLossWeights, batch_contrastive_loss, finetune_loss
from .nn.model import ENCODER_KEYS, ModelConfig, ModelParams, decode_head, encode, init_params
from .nn.optim import AdamState, TrainSchedule, adam_step, lr_at
from .sampling import BatchSpec, SamplingStrategy, build_batch, default_radius


@dataclass
class ContrastiveConfig:
    tau: float = 0.5
    n_pos: int = 2
    n_neg: int = 8
    M: int = 32
    radius: int | None = None  # None: derived from the dataset fps
    strategy: SamplingStrategy = field(default_factory=lambda: SamplingStrategy("linear"))
    positive_in_denominator: bool = False

    def __post_init__(self):
        if isinstance(self.strategy, str):
            self.strategy = SamplingStrategy(self.strategy)
        elif isinstance(self.strategy, dict):
            self.strategy = SamplingStrategy(**self.strategy)
        if not self.tau > 0:
            raise InvalidConfig("tau must be positive")
        if self.n_pos < 1 or self.n_neg < 1 or self.M < 1:
            raise InvalidConfig("n_pos, n_neg and M must be at least 1")

    def batch_spec(self, fps):
        k = self.radius if self.radius is not None else default_radius(fps)
        return BatchSpec(M=self.M, n_pos=self.n_pos, n_neg=self.n_neg, strategy=self.strategy, radius=k)

    def to_dict(self):
        d = asdict(self)
        d["strategy"] = {"kind": self.strategy.kind, "sigma": self.strategy.sigma}
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _sequences(data):
    """Flatten a dataset, a list of datasets or a list of sequences."""
    if hasattr(data, "sequences"):
        return list(data.sequences)
    out = []
    for item in data:
        out.extend(item.sequences if hasattr(item, "sequences") else [item])
    return out


def _dataset_groups(data):
    if hasattr(data, "sequences"):
        return [data]
    if data and all(hasattr(d, "sequences") for d in data):
        return list(data)
    return [list(data)]


def _group_sequences(group):
    return group.sequences if hasattr(group, "sequences") else group


def _steps_per_epoch(schedule, n_items):
    if schedule.steps_per_epoch is not None:
        return int(schedule.steps_per_epoch)
    return max(1, math.ceil(n_items / schedule.batch_size))


def _grads(params: ModelParams, keys=None):
    keys = keys if keys is not None else list(params.tensors)
    return {k: params[k].grad for k in keys if params[k].grad is not None}


# -- pre-training ----------------------------------------------------------


def pretrain(
    datasets,
    ccfg: ContrastiveConfig | None = None,
    schedule: TrainSchedule | None = None,
    seed: int = 0,
    policy: AugmentationPolicy = PRETRAIN_POLICY,
    coherent: bool = True,
    model_config: ModelConfig | None = None,
    callback=None,
):
    """Time-contrastive pre-training of the encoder on unlabeled sequences.

    One epoch is ``ceil(n_sequences / M)`` steps unless the schedule fixes
    ``steps_per_epoch``. Each anchor's sampled frames are augmented together
    so they share one geometric transform (or per-frame transforms with
    ``coherent=False``). Returns ``(params, history)`` where ``history`` holds
    the mean loss and learning rate of every epoch.
    """
    ccfg = ccfg or ContrastiveConfig()
    groups = _dataset_groups(datasets)
    seqs = [s for g in groups for s in _group_sequences(g)]
    if not seqs:
        raise EmptyBatch("no sequences to pre-train on")
    schedule = schedule or TrainSchedule(batch_size=ccfg.M)
    if schedule.batch_size != ccfg.M:
        schedule = replace(schedule, batch_size=ccfg.M)
    size = seqs[0].frames.shape[1]
    model_config = model_config or ModelConfig.for_image_size(size)
    spec = ccfg.batch_spec(seqs[0].fps)

    rng = np.random.default_rng(seed)
    init_rng, loop_rng = rng.spawn(2)
    params = init_params(model_config, init_rng)
    state = AdamState()
    steps = _steps_per_epoch(schedule, len(seqs))
    per_anchor = 1 + spec.n_pos + spec.n_neg
    history = []
    for epoch in range(int(math.ceil(schedule.total_epochs))):
        losses = []
        for step in range(steps):
            lr = lr_at(epoch + step / steps, schedule)
            step_rng = loop_rng.spawn(1)[0]
            batch_rng, aug_rng = step_rng.spawn(2)
            batch = build_batch(groups, spec, batch_rng)
            aug_rngs = aug_rng.spawn(len(batch))
            images = np.empty((len(batch) * per_anchor, size, size, 3), dtype=np.float32)
            for b, (sample, r) in enumerate(zip(batch, aug_rngs)):
                frames = _group_sequences(groups[sample.dataset])[sample.sequence].frames[sample.frames]
                images[b * per_anchor : (b + 1) * per_anchor] = augment.augment_sequence(
                    frames, policy, r, coherent=coherent
                )
            z = encode(params, images).reshape(len(batch), per_anchor, model_config.embed_dim)
            loss = batch_contrastive_loss(
                z[:, 0],
                z[:, 1 : 1 + spec.n_pos],
                z[:, 1 + spec.n_pos :],
                tau=ccfg.tau,
                positive_in_denominator=ccfg.positive_in_denominator,
            )
            params.zero_grad()
            loss.backward()
            adam_step(params, _grads(params, ENCODER_KEYS), state, lr)
            losses.append(float(loss.data))
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr_at(epoch, schedule)})
        if callback is not None:
            callback(history[-1])
    return params, history


# -- fine-tuning -----------------------------------------------------------


def _augmented_batch(seqs, index, policy, rng, image_size):
    """Images and labels for the (sequence, frame) pairs in ``index``, one geometric draw each."""
    geos = [augment.sample_geometric(policy, rng, image_size) for _ in index]
    images = np.stack([seqs[s].frames[f] for s, f in index])
    j3d, j2d, _, poses = augment.transform_labels_each(
        np.stack([seqs[s].j3d[f] for s, f in index]),
        np.stack([seqs[s].j2d[f] for s, f in index]),
        np.stack([seqs[s].cam for s, _ in index]),
        np.stack([seqs[s].poses[f] for s, f in index]),
        geos,
        image_size,
    )
    shapes = np.stack([seqs[s].shape for s, _ in index])
    images = augment.apply_geometric_each(images, geos)
    return images, {"j2d": j2d, "j3d": j3d, "poses": poses, "shape": shapes}


def finetune(
    params: ModelParams | None,
    sequences,
    weights: FineTuneLossWeights | None = None,
    schedule: TrainSchedule | None = None,
    seed: int = 0,
    policy: AugmentationPolicy = FINETUNE_POLICY,
    tmpl=None,
    model_config: ModelConfig | None = None,
    callback=None,
):
    """Supervised training of encoder and head on labeled frames.

    ``params`` supplies the pre-trained encoder, or ``None`` for a fresh
    one. The head is always initialized from ``seed``, so arms that share a
    seed start from the same head and see the same batches. Returns
    ``(params, history)``.
    """
    weights = weights or FineTuneLossWeights()
    schedule = schedule or TrainSchedule(base_lr=5e-4, batch_size=128)
    tmpl = tmpl or default_template()
    seqs = _sequences(sequences)
    index = np.array([(s, f) for s, seq in enumerate(seqs) for f in range(len(seq))], dtype=np.int64)
    if len(index) == 0:
        raise EmptyBatch("no labeled frames")
    size = seqs[0].frames.shape[1]
    if params is not None:
        model_config = params.config
    model_config = model_config or ModelConfig.for_image_size(size)

    rng = np.random.default_rng(seed)
    init_rng, loop_rng = rng.spawn(2)
    model = init_params(model_config, init_rng)
    if params is not None:
        for k in ENCODER_KEYS:
            model.tensors[k].data = params[k].data.astype(model[k].dtype).copy()
    state = AdamState()
    bs = min(schedule.batch_size, len(index))
    steps = _steps_per_epoch(replace(schedule, batch_size=bs), len(index))
    history = []
    for epoch in range(int(math.ceil(schedule.total_epochs))):
        order = loop_rng.permutation(len(index))
        parts_sum = {"l2d": 0.0, "l3d": 0.0, "ltheta": 0.0}
        totals = []
        for step in range(steps):
            lr = lr_at(epoch + step / steps, schedule)
            take = order[(step * bs) % len(order) :][:bs]
            if len(take) < bs:
                take = np.concatenate([take, order[: bs - len(take)]])
            images, gt = _augmented_batch(seqs, index[take], policy, loop_rng, size)
            pred = decode_head(model, encode(model, images))
            loss, parts = finetune_loss(pred, gt, weights, tmpl)
            model.zero_grad()
            loss.backward()
            adam_step(model, _grads(model), state, lr)
            totals.append(float(loss.data))
            for k in parts_sum:
                parts_sum[k] += parts[k] / steps
        history.append({"epoch": epoch, "loss": float(np.mean(totals)), "lr": lr_at(epoch, schedule), **parts_sum})
        if callback is not None:
            callback(history[-1])
    return model, history


# -- ablation arms ---------------------------------------------------------


class ExperimentArm(str, Enum):
    BASELINE = "Baseline"
    TEMPCLR = "TempCLR"
    NO_COHERENT_AUG = "TempCLR-NoCoherentAug"
    NO_PROB_SAMPLING = "TempCLR-NoProbSampling"

    @property
    def pretrains(self):
        return self is not ExperimentArm.BASELINE


ARMS = tuple(ExperimentArm)


def arm_pretrain_settings(arm: ExperimentArm, ccfg: ContrastiveConfig):
    """``(ContrastiveConfig, coherent)`` for an arm; arms differ only in the flagged component."""
    if arm is ExperimentArm.NO_COHERENT_AUG:
        return ccfg, False
    if arm is ExperimentArm.NO_PROB_SAMPLING:
        return replace(ccfg, strategy=SamplingStrategy("uniform")), True
    return ccfg, True


# -- ablation --------------------------------------------------------------

TABLE_METRICS = ("ra.accel", "ra.epe", "pa.epe")


@dataclass
class AblationConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    arms: tuple = tuple(a.value for a in ARMS)
    n_labeled: int | None = None  # fine-tune on the first n training sequences; None: all
    workers: int = 1

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.arms = tuple(ExperimentArm(a).value for a in self.arms)
        if not self.seeds:
            raise InvalidConfig("ablation needs at least one seed")
        if self.workers < 1:
            raise InvalidConfig("workers must be at least 1")

    def to_dict(self):
        return {"seeds": list(self.seeds), "arms": list(self.arms), "n_labeled": self.n_labeled, "workers": self.workers}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None


def default_finetune_schedule():
    """lr 5e-4 at batch 128 for 10 epochs; longer runs only overfit 200 training sequences."""
    return TrainSchedule(base_lr=5e-4, total_epochs=10, warmup_epochs=2, batch_size=128)


@dataclass
class StageSettings:
    """Everything an arm run needs besides the data, the arm and the seed."""

    ccfg: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    pretrain_schedule: TrainSchedule = field(default_factory=TrainSchedule)
    finetune_schedule: TrainSchedule = field(default_factory=default_finetune_schedule)
    weights: FineTuneLossWeights = field(default_factory=FineTuneLossWeights)
    pretrain_policy: AugmentationPolicy = PRETRAIN_POLICY
    finetune_policy: AugmentationPolicy = FINETUNE_POLICY


def run_arm(arm, seed, train, test, settings: StageSettings, n_labeled=None):
    """Pre-train (if the arm does), fine-tune and evaluate one arm with one seed.

    Returns ``(flat_metrics, params)``. Pre-training arms also report the
    embedding coherence of the pre-trained encoder on ``test`` under
    ``coherence.*`` keys. Every arm fine-tunes on the same
    labeled sequences with the same seed, so arms differ only in the encoder
    they start from.
    """
    from .metrics import embedding_coherence, evaluate

    arm = ExperimentArm(arm)
    seqs = _sequences(train)
    labeled = seqs if n_labeled is None else seqs[: int(n_labeled)]
    tmpl = getattr(train, "template", None) or default_template()
    encoder = None
    if arm.pretrains:
        ccfg, coherent = arm_pretrain_settings(arm, settings.ccfg)
        encoder, _ = pretrain(
            train, ccfg, settings.pretrain_schedule, seed=seed, policy=settings.pretrain_policy, coherent=coherent
        )
    params, _ = finetune(
        encoder, labeled, settings.weights, settings.finetune_schedule, seed=seed, policy=settings.finetune_policy, tmpl=tmpl
    )
    report = evaluate(params, _sequences(test), tmpl)
    flat = report.flat()
    if encoder is not None:
        test_seqs = _sequences(test)
        k = settings.ccfg.batch_spec(test_seqs[0].fps).radius
        for name, value in embedding_coherence(encoder, test_seqs, k).items():
            flat[f"coherence.{name}"] = value
    return flat, params


_SHARED = {}


def _arm_job(job):
    arm, seed = job
    flat, _ = run_arm(arm, seed, _SHARED["train"], _SHARED["test"], _SHARED["settings"], _SHARED["n_labeled"])
    return arm, seed, flat


def run_ablation(train, test, settings: StageSettings | None = None, config: AblationConfig | None = None):
    """All arms over all seeds; per-seed metrics plus the median of each metric per arm.

    With ``workers > 1`` the (arm, seed) jobs run in forked processes. Each
    job is seeded on its own, so the result does not depend on the worker
    count.
    """
    settings = settings or StageSettings()
    config = config or AblationConfig()
    jobs = [(arm, seed) for arm in config.arms for seed in config.seeds]
    _SHARED.update(train=train, test=test, settings=settings, n_labeled=config.n_labeled)
    try:
        if config.workers > 1:
            import multiprocessing as mp

            with mp.get_context("fork").Pool(min(config.workers, len(jobs))) as pool:
                results = pool.map(_arm_job, jobs, chunksize=1)
        else:
            results = [_arm_job(j) for j in jobs]
    finally:
        _SHARED.clear()

    arms = {}
    for arm, seed, flat in results:
        arms.setdefault(arm, {"per_seed": {}})["per_seed"][str(seed)] = flat
    for arm, entry in arms.items():
        keys = sorted(next(iter(entry["per_seed"].values())))
        entry["median"] = {k: float(np.median([v[k] for v in entry["per_seed"].values()])) for k in keys}
    return {"arms": arms, "seeds": list(config.seeds), "table_metrics": list(TABLE_METRICS)}


def ablation_table(result):
    """Rows ``(arm, accel, ra_epe, pa_epe)`` of per-arm medians, in arm order."""
    return [(arm, *(entry["median"][m] for m in TABLE_METRICS)) for arm, entry in result["arms"].items()]
