"""Two-mode adversarial training with the nice-generation gate.

Per mini-batch of the training split:

1. update D1 on real faces vs. G1's completions of their occluded versions;
2. update G1 against the frozen D1 with BCE plus the structural loss;
3. if the batch's gate loss is at or below the threshold, append G1's
   completions and the matching real faces to the nice pool;
4. while the pool is non-empty, update D2 and then G2 (D2 frozen) on
   mini-batches drawn from the pool.  Mode-II never writes to Mode-I weights.
"""

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses as L
from .errors import ConfigError, ContractError, NumericError
from .networks import build_network, d_forward, g1_forward, g2_forward, load_checkpoint, save_checkpoint
from .optim import OptimizerState, make_optimizer, optimizer_step
from .tensor import Tensor

log = logging.getLogger(__name__)

MAX_EPOCHS_CAP = 100_000
G1_OBJECTIVES = ("full", "bce", "bce+ssim")
GATE_LOSSES = ("structural", "generator")
AUX_MODES = ("abs", "plain")


@dataclass
class TrainConfig:
    batch_size: int = 20
    gate_threshold: float = 0.01
    max_epochs: int = 1000
    seed: int = 0
    d1_optimizer: dict = field(default_factory=lambda: {"kind": "adam"})
    g1_optimizer: dict = field(default_factory=lambda: {"kind": "sgd"})
    d2_optimizer: dict = field(default_factory=lambda: {"kind": "adam"})
    g2_optimizer: dict = field(default_factory=lambda: {"kind": "adam"})
    g1_objective: str = "full"
    gate_loss: str = "structural"
    aux_mode: str = "abs"
    mode2: bool = True
    pool_cap: int = None  # None: 10x the training set size
    early_stop: bool = False
    plateau_window: int = 50
    plateau_band: float = 0.05
    ssim_window: int = 8
    pmse_patch: int = 8
    g1_bottleneck: int = 256
    log_path: str = None
    checkpoint_dir: str = None
    checkpoint_every: int = 0
    audit: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be at least 1, got {self.batch_size}")
        if not self.gate_threshold > 0:
            raise ConfigError(f"gate threshold must be positive, got {self.gate_threshold}")
        if not 1 <= self.max_epochs <= MAX_EPOCHS_CAP:
            raise ConfigError(f"max_epochs must lie in [1, {MAX_EPOCHS_CAP}], got {self.max_epochs}")
        if self.g1_objective not in G1_OBJECTIVES:
            raise ConfigError(f"g1_objective must be one of {G1_OBJECTIVES}")
        if self.gate_loss not in GATE_LOSSES:
            raise ConfigError(f"gate_loss must be one of {GATE_LOSSES}")
        if self.aux_mode not in AUX_MODES:
            raise ConfigError(f"aux_mode must be one of {AUX_MODES}")
        if self.pool_cap is not None and self.pool_cap < self.batch_size:
            raise ConfigError("pool cap must hold at least one mini-batch")
        for name in ("d1", "g1", "d2", "g2"):
            make_optimizer(**getattr(self, f"{name}_optimizer"))

    @property
    def ssim_cfg(self):
        return L.SsimConfig(window_size=self.ssim_window)

    @property
    def pmse_cfg(self):
        return L.PmseConfig(patch_size=self.pmse_patch)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class EpochRecord:
    epoch: int
    loss_d1: float
    loss_g1: float
    loss_d2: float = None
    loss_g2: float = None
    nice_pool_size: int = 0
    seconds: float = 0.0
    mode1_batches: int = 0
    mode2_batches: int = 0
    admitted_batches: int = 0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


class NicePool:
    """Paired G1 outputs and ground-truth faces admitted by the gate."""

    def __init__(self, cap):
        self.cap = cap
        self.nice = []
        self.real = []
        self.subjects = []
        self.gate_losses = []

    def __len__(self):
        return len(self.nice)

    def append(self, nice, real, subjects, gate_loss):
        for x, y, s in zip(nice, real, subjects):
            self.nice.append(np.array(x, dtype=np.float32))
            self.real.append(np.array(y, dtype=np.float32))
            self.subjects.append(int(s))
            self.gate_losses.append(float(gate_loss))
        overflow = len(self.nice) - self.cap
        if overflow > 0:
            del self.nice[:overflow], self.real[:overflow], self.subjects[:overflow], self.gate_losses[:overflow]

    def sample(self, rng, size):
        index = rng.choice(len(self.nice), size=min(size, len(self.nice)), replace=False)
        return (
            np.stack([self.nice[i] for i in index]),
            np.stack([self.real[i] for i in index]),
            [self.subjects[i] for i in index],
        )


@dataclass
class TrainState:
    epoch: int
    rng: np.random.Generator
    pool: NicePool
    optimizers: dict
    records: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    step_counts: dict = field(default_factory=lambda: {"d1": 0, "g1": 0, "d2": 0, "g2": 0})


@dataclass
class TrainResult:
    models: dict
    state: TrainState
    config: TrainConfig

    @property
    def records(self):
        return self.state.records


def init_models(config, channels=1, size=32):
    """Fresh D1, G1, D2, G2 drawn from seed-derived generators."""
    shape = {"channels": channels, "size": size}
    return {
        "d1": build_network("d", np.random.default_rng([config.seed, 1]), **shape),
        "g1": build_network("g1", np.random.default_rng([config.seed, 2]), bottleneck=config.g1_bottleneck, **shape),
        "d2": build_network("d", np.random.default_rng([config.seed, 3]), **shape),
        "g2": build_network("g2", np.random.default_rng([config.seed, 4]), **shape),
    }


def init_state(config, train_size):
    cap = config.pool_cap or 10 * train_size
    optimizers = {name: make_optimizer(**getattr(config, f"{name}_optimizer")) for name in ("d1", "g1", "d2", "g2")}
    return TrainState(0, np.random.default_rng([config.seed, 0]), NicePool(cap), optimizers)


# losses of the four networks


def _aligned(a, b):
    if a.shape != b.shape:
        raise ContractError(f"batches are not aligned: {a.shape} vs {b.shape}")


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def loss_d1(real_batch, occluded_batch, d1_params, g1_params, fake=None):
    """BCE(D1(real), 1) + BCE(D1(G1(occluded)), 0); the completion is a constant."""
    real, occ = _t(real_batch), _t(occluded_batch)
    _aligned(real, occ)
    fake = (fake if fake is not None else g1_forward(occ, g1_params)).detach()
    return L.bce(d_forward(real, d1_params), 1.0) + L.bce(d_forward(fake, d1_params), 0.0)


def g1_terms(occluded_batch, real_batch, g1_params, d1_params, objective="full", ssim_cfg=None, pmse_cfg=None, fake=None):
    """Components of the G1 objective with D1 frozen.

    Returns a dict with ``total``, ``bce``, ``structural`` (always computed,
    used by the gate) and ``fake`` (the completions, still on the graph).
    """
    occ, real = _t(occluded_batch), _t(real_batch)
    _aligned(real, occ)
    if fake is None:
        fake = g1_forward(occ, g1_params)
    with d1_params.frozen():
        adversarial = L.bce(d_forward(fake, d1_params), 1.0)
    structural = L.structural_loss(real, fake, ssim_cfg, pmse_cfg)
    if objective == "full":
        total = adversarial + structural
    elif objective == "bce+ssim":
        total = adversarial + L.ssim_loss(real, fake, ssim_cfg)
    elif objective == "bce":
        total = adversarial
    else:
        raise ConfigError(f"unknown G1 objective {objective!r}")
    return {"total": total, "bce": adversarial, "structural": structural, "fake": fake}


def loss_g1(occluded_batch, real_batch, g1_params, d1_params, objective="full", ssim_cfg=None, pmse_cfg=None):
    """BCE(D1(G1(occluded)), 1) + L_st(real, G1(occluded)) with D1 frozen."""
    return g1_terms(occluded_batch, real_batch, g1_params, d1_params, objective, ssim_cfg, pmse_cfg)["total"]


def nice_gate(pool, gen_batch, real_batch, x_loss, threshold, subjects=None):
    """Admit the batch pairwise into ``pool`` iff ``x_loss <= threshold``."""
    if x_loss > threshold:
        return False
    gen = gen_batch.data if isinstance(gen_batch, Tensor) else gen_batch
    real = real_batch.data if isinstance(real_batch, Tensor) else real_batch
    _aligned(np.asarray(gen), np.asarray(real))
    if subjects is None:
        subjects = [-1] * len(gen)
    pool.append(gen, real, subjects, x_loss)
    return True


def loss_d2(real_pool_batch, nice_pool_batch, d2_params, g2_params):
    """BCE(D2(real), 1) + BCE(D2(G2(nice)), 0); G2's output is a constant."""
    if len(real_pool_batch) == 0 or len(nice_pool_batch) == 0:
        raise ContractError("nice pool is empty")
    real, nice = _t(real_pool_batch), _t(nice_pool_batch)
    _aligned(real, nice)
    fake = g2_forward(nice, g2_params).detach()
    return L.bce(d_forward(real, d2_params), 1.0) + L.bce(d_forward(fake, d2_params), 0.0)


def aux_loss(real, refined, stored_g1_lst, aux_mode="abs", ssim_cfg=None, pmse_cfg=None):
    """Gap between G1's recorded structural loss and G2's current one."""
    refined_lst = L.structural_loss(real, refined, ssim_cfg, pmse_cfg)
    if aux_mode == "plain":
        return refined_lst
    return (refined_lst - float(stored_g1_lst)).abs()


def loss_g2(nice_pool_batch, real_pool_batch, g2_params, d2_params, stored_g1_lst, aux_mode="abs", ssim_cfg=None, pmse_cfg=None):
    """BCE(D2(G2(nice)), 1) + |stored_g1_lst - L_st(real, G2(nice))| with D2 frozen."""
    if len(real_pool_batch) == 0 or len(nice_pool_batch) == 0:
        raise ContractError("nice pool is empty")
    nice, real = _t(nice_pool_batch), _t(real_pool_batch)
    _aligned(real, nice)
    refined = g2_forward(nice, g2_params)
    with d2_params.frozen():
        adversarial = L.bce(d_forward(refined, d2_params), 1.0)
    return adversarial + aux_loss(real, refined, stored_g1_lst, aux_mode, ssim_cfg, pmse_cfg)


# training loop


def _finite(name, value):
    if not math.isfinite(value):
        raise NumericError(f"{name} became non-finite ({value})")
    return value


def _step(name, loss, params, state, models, audit_info):
    before = {k: m.fingerprint() for k, m in models.items()} if audit_info is not None else None
    params.zero_grad()
    loss.backward()
    optimizer_step(params, state.optimizers[name])
    params.zero_grad()
    state.step_counts[name] += 1
    if audit_info is not None:
        after = {k: m.fingerprint() for k, m in models.items()}
        state.trace.append(dict(audit_info, step=name, before=before, after=after))


def _plateaued(records, window, band):
    if len(records) < window:
        return False
    return all(abs(r.loss_d1 - r.loss_g1) < band for r in records[-window:])


def train(dataset, config, models=None, state=None):
    """Run Algorithm-1 style training on ``dataset`` (its full contents are used).

    ``models``/``state`` resume a previous run; otherwise both are created
    from ``config.seed``.  Returns a :class:`TrainResult`.
    """
    if len(dataset) == 0:
        raise ContractError("training split is empty")
    n, channels, size = len(dataset), dataset.full.shape[1], dataset.full.shape[2]
    models = models or init_models(config, channels, size)
    state = state or init_state(config, n)
    ssim_cfg, pmse_cfg = config.ssim_cfg, config.pmse_cfg
    bs = config.batch_size
    n_batches = math.ceil(n / bs)
    d1, g1, d2, g2 = models["d1"], models["g1"], models["d2"], models["g2"]

    try:
        while state.epoch < config.max_epochs:
            started = time.perf_counter()
            epoch = state.epoch + 1
            order = state.rng.permutation(n)
            sums = {"d1": 0.0, "g1": 0.0, "d2": 0.0, "g2": 0.0}
            m1 = m2 = admitted = 0
            for b in range(n_batches):
                index = order[b * bs : (b + 1) * bs]
                real = Tensor(dataset.full[index])
                occ = Tensor(dataset.occluded[index])
                audit = {"epoch": epoch, "batch": b} if config.audit else None

                # G1's weights do not change during the D1 step, so one forward
                # pass serves both updates
                fake = g1_forward(occ, g1)
                ld1 = loss_d1(real, occ, d1, g1, fake=fake)
                sums["d1"] += _finite("loss_d1", ld1.item())
                _step("d1", ld1, d1, state, models, audit)

                terms = g1_terms(occ, real, g1, d1, config.g1_objective, ssim_cfg, pmse_cfg, fake=fake)
                lg1 = terms["total"]
                sums["g1"] += _finite("loss_g1", lg1.item())
                gate_value = terms["structural"].item() if config.gate_loss == "structural" else lg1.item()
                generated = terms["fake"].data.copy()
                _step("g1", lg1, g1, state, models, audit)
                m1 += 1

                pool_before = len(state.pool)
                ok = nice_gate(
                    state.pool, generated, dataset.full[index], gate_value, config.gate_threshold,
                    dataset.subject_ids[index].tolist(),
                )
                admitted += ok
                if config.audit:
                    state.trace.append(
                        {"epoch": epoch, "batch": b, "step": "gate", "gate_loss": gate_value, "admitted": ok,
                         "pool_before": pool_before, "pool_after": len(state.pool)}
                    )

                if not config.mode2 or len(state.pool) == 0:
                    continue
                # enough pool mini-batches per Mode-I batch to sweep the pool once per epoch
                for _ in range(max(1, math.ceil(len(state.pool) / (bs * n_batches)))):
                    nice_np, real_np, _subjects = state.pool.sample(state.rng, bs)
                    nice, preal = Tensor(nice_np), Tensor(real_np)
                    if audit is not None:
                        audit = dict(audit, pool_subjects=_subjects)
                    ld2 = loss_d2(preal, nice, d2, g2)
                    sums["d2"] += _finite("loss_d2", ld2.item())
                    _step("d2", ld2, d2, state, models, audit)
                    stored = L.structural_loss(preal, nice, ssim_cfg, pmse_cfg).item()
                    lg2 = loss_g2(nice, preal, g2, d2, stored, config.aux_mode, ssim_cfg, pmse_cfg)
                    sums["g2"] += _finite("loss_g2", lg2.item())
                    _step("g2", lg2, g2, state, models, audit)
                    m2 += 1

            state.epoch = epoch
            record = EpochRecord(
                epoch=epoch,
                loss_d1=sums["d1"] / m1,
                loss_g1=sums["g1"] / m1,
                loss_d2=sums["d2"] / m2 if m2 else None,
                loss_g2=sums["g2"] / m2 if m2 else None,
                nice_pool_size=len(state.pool),
                seconds=time.perf_counter() - started,
                mode1_batches=m1,
                mode2_batches=m2,
                admitted_batches=admitted,
            )
            state.records.append(record)
            log.info("epoch %d d1=%.4f g1=%.4f pool=%d", epoch, record.loss_d1, record.loss_g1, record.nice_pool_size)
            if config.log_path:
                with open(config.log_path, "a") as fh:
                    fh.write(record.to_json() + "\n")
            if config.checkpoint_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_training_checkpoint(os.path.join(config.checkpoint_dir, f"epoch_{epoch:06d}.sdg"), models, state, config)
            if config.early_stop and _plateaued(state.records, config.plateau_window, config.plateau_band):
                log.info("loss plateau reached at epoch %d", epoch)
                break
    except BaseException:
        if config.checkpoint_dir:
            save_training_checkpoint(os.path.join(config.checkpoint_dir, "aborted.sdg"), models, state, config)
        raise

    if config.checkpoint_dir:
        save_training_checkpoint(os.path.join(config.checkpoint_dir, "final.sdg"), models, state, config)
    return TrainResult(models, state, config)


# checkpoints with optimizer and pool state


def save_training_checkpoint(path, models, state, config):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    arrays, optim_meta = {}, {}
    for name, opt in state.optimizers.items():
        optim_meta[name] = dict(opt.settings(), step_count=opt.step_count)
        for pname, (m, v) in opt.moments.items():
            arrays[f"opt/{name}/{pname}/m"] = m
            arrays[f"opt/{name}/{pname}/v"] = v
    if len(state.pool):
        arrays["pool/nice"] = np.stack(state.pool.nice)
        arrays["pool/real"] = np.stack(state.pool.real)
    meta = {
        "config": config.to_dict(),
        "optimizers": optim_meta,
        "pool": {"cap": state.pool.cap, "subjects": state.pool.subjects, "gate_losses": state.pool.gate_losses},
        "step_counts": state.step_counts,
    }
    save_checkpoint(path, models, state.epoch, state.rng.bit_generator.state, meta, arrays)


def resume_training(path):
    """Load models, training state and config saved by :func:`save_training_checkpoint`."""
    ckpt = load_checkpoint(path)
    config = TrainConfig.from_dict(ckpt.meta["config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    pool_meta = ckpt.meta["pool"]
    pool = NicePool(pool_meta["cap"])
    if "pool/nice" in ckpt.arrays:
        pool.nice = list(ckpt.arrays["pool/nice"])
        pool.real = list(ckpt.arrays["pool/real"])
    pool.subjects = list(pool_meta["subjects"])
    pool.gate_losses = list(pool_meta["gate_losses"])
    optimizers = {}
    for name, settings in ckpt.meta["optimizers"].items():
        settings = dict(settings)
        step_count = settings.pop("step_count")
        opt = OptimizerState(**settings, step_count=step_count)
        for pname in ckpt.models[name].names():
            key = f"opt/{name}/{pname}"
            if f"{key}/m" in ckpt.arrays:
                opt.moments[pname] = (ckpt.arrays[f"{key}/m"].copy(), ckpt.arrays[f"{key}/v"].copy())
        optimizers[name] = opt
    state = TrainState(ckpt.epoch, rng, pool, optimizers, step_counts=dict(ckpt.meta["step_counts"]))
    return ckpt.models, state, config
