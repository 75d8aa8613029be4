"""FedAvg round loop with single-shot model-replacement backdoor injection.

The server update is ``G' = G + (eta / n_round) * sum(delta_i)``. A malicious
client trains ``X`` from ``G`` on partly triggered batches and submits
``gamma * (X - G)``; with ``gamma = n_round / eta`` and otherwise-zero updates
the new global model is exactly ``X``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .data import Dataset, Partition, make_batches
from .defense import DefenseConfig, add_noise, clip_update
from .errors import AggregationError, ConfigurationError, FCBAError, LayoutError, RoundError
from .metrics import DEFAULT_OFFSETS, RoundRecord, asr, asr_inputs, cda, feature_distance
from .rng import substream
from .trigger import (
    GlobalTriggerSpec,
    LocalTriggerPattern,
    TriggerStrategy,
    apply_trigger,
    enumerate_triggers,
    malicious_count,
    trigger_mask,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FederationConfig:
    n_total: int = 100
    n_round: int = 10
    eta: float = 0.1
    total_rounds: int = 100
    master_seed: int = 0
    lr: float = 0.1
    local_epochs: int = 1
    batch_size: int = 64
    warmup_rounds: int = 0
    workers: int = 1
    momentum: float = 0.9

    def __post_init__(self):
        if not 1 <= self.n_round <= self.n_total:
            raise ConfigurationError("clients per round must lie in [1, total clients]")
        if not self.eta > 0:
            raise ConfigurationError("global learning rate eta must be > 0")
        if self.total_rounds < 0 or self.warmup_rounds < 0:
            raise ConfigurationError("round counts must be >= 0")
        if self.lr < 0 or self.local_epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("invalid local training hyperparameters")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")

    @property
    def replacement_gamma(self) -> float:
        return self.n_round / self.eta


@dataclass(frozen=True)
class AttackConfig:
    """Backdoor attack settings.

    ``n_attackers`` and ``n_injections`` default to the strategy's malicious
    count M; overriding them builds the dispersed-poisoning controls (e.g. 4
    simple-division clients over 14 injection rounds). Patterns and clients are
    reused round-robin when the counts differ.
    """

    strategy: TriggerStrategy = TriggerStrategy.FULL_COMBINATION
    m: int = 4
    gamma: float = 100.0
    r: int = 3
    interval: int = 1
    target: int = 2
    lr_poison: float = 0.05
    epochs_poison: int = 10
    start_round: int = 2
    malicious_client_ids: tuple[int, ...] | None = None
    trigger_size: int = 4
    trigger_gap: int = 2
    trigger_shift: tuple[int, int] = (0, 0)
    pixel_value: float = 1.0
    replacement: str = "approx"
    clip_aware: bool = False
    n_attackers: int | None = None
    n_injections: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategy", TriggerStrategy.parse(self.strategy))
        if self.m < 2:
            raise ConfigurationError("m must be >= 2")
        if not 0 <= self.r <= 64:
            raise ConfigurationError("poison count r must lie in [0, 64]")
        if not self.gamma > 0:
            raise ConfigurationError("scale factor gamma must be > 0")
        if self.interval < 1:
            raise ConfigurationError("poison round interval I must be >= 1")
        if self.start_round < 0:
            raise ConfigurationError("attack start round must be >= 0")
        if self.replacement not in ("approx", "exact"):
            raise ConfigurationError("replacement must be 'approx' or 'exact'")
        if self.lr_poison < 0 or self.epochs_poison < 0:
            raise ConfigurationError("invalid poison training hyperparameters")
        if self.n_attackers is not None and self.n_attackers < 1:
            raise ConfigurationError("n_attackers must be >= 1")
        if self.n_injections is not None and self.n_injections < 1:
            raise ConfigurationError("n_injections must be >= 1")
        if self.malicious_client_ids is not None:
            ids = tuple(int(c) for c in self.malicious_client_ids)
            object.__setattr__(self, "malicious_client_ids", ids)
            if len(set(ids)) != len(ids):
                raise ConfigurationError("malicious client ids must be distinct")
            if len(ids) != self.attackers:
                raise ConfigurationError(
                    f"need {self.attackers} malicious client ids for {self.strategy.value} with m={self.m}, got {len(ids)}"
                )

    @property
    def M(self) -> int:
        return malicious_count(self.m, self.strategy)

    @property
    def attackers(self) -> int:
        return self.n_attackers if self.n_attackers is not None else self.M

    @property
    def injections(self) -> int:
        return self.n_injections if self.n_injections is not None else self.attackers

    @property
    def attack_end(self) -> int:
        return self.start_round + (self.injections - 1) * self.interval

    def patterns(self) -> list[LocalTriggerPattern]:
        base = enumerate_triggers(self.m, self.strategy)
        return [base[k % len(base)] for k in range(self.attackers)]

    def trigger_spec(self, image_shape) -> GlobalTriggerSpec:
        sx, sy = self.trigger_shift
        return GlobalTriggerSpec(m=self.m, size=self.trigger_size, gap=self.trigger_gap, shift_x=sx, shift_y=sy,
                                 pixel_value=self.pixel_value, image_shape=tuple(image_shape))


@dataclass(frozen=True)
class EvalConfig:
    offsets: tuple[int, ...] = DEFAULT_OFFSETS
    cadence_pre: int = 10
    cadence_post: int = 1
    feature_samples: int = 200
    feature_pairing: str = "all"
    feature_class: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(sorted(int(t) for t in self.offsets)))
        if self.cadence_pre < 1 or self.cadence_post < 1:
            raise ConfigurationError("evaluation cadence must be >= 1")
        if self.feature_pairing not in ("all", "matched"):
            raise ConfigurationError("feature_pairing must be 'all' or 'matched'")


@dataclass(frozen=True)
class RoundPlan:
    round: int
    selected: tuple[int, ...]
    malicious: int | None = None

    def __post_init__(self):
        if len(set(self.selected)) != len(self.selected):
            raise ConfigurationError("selected client ids must be distinct")
        if self.malicious is not None and self.malicious not in self.selected:
            raise ConfigurationError("scheduled malicious client must be among the selected")


@dataclass(frozen=True)
class FederatedData:
    train: Dataset
    test: Dataset
    partition: Partition


@dataclass
class RunResult:
    records: list[RoundRecord]
    params: nn.ParamVector
    attack_end: int | None = None
    schedule: dict[int, int] = field(default_factory=dict)


# ------------------------------------------------------------------- schedule


def resolve_attackers(atk: AttackConfig, fed: FederationConfig) -> AttackConfig:
    """Fill in malicious client ids drawn uniformly from the whole pool when unset."""
    if atk.malicious_client_ids is not None:
        bad = [c for c in atk.malicious_client_ids if not 0 <= c < fed.n_total]
        if bad:
            raise ConfigurationError(f"malicious client ids out of range: {bad}")
        return atk
    if atk.attackers > fed.n_total:
        raise ConfigurationError(f"{atk.attackers} attackers exceed the {fed.n_total} clients")
    ids = substream(fed.master_seed, "malicious").choice(fed.n_total, atk.attackers, replace=False)
    return dataclasses.replace(atk, malicious_client_ids=tuple(int(c) for c in ids))


def attack_schedule(atk: AttackConfig, total_rounds: int | None = None) -> dict[int, int]:
    """Round -> malicious client id; injection k happens at start + k * I."""
    if atk.malicious_client_ids is None:
        raise ConfigurationError("malicious client ids unresolved; call resolve_attackers first")
    if total_rounds is not None and atk.attack_end >= total_rounds:
        raise ConfigurationError(
            f"attack schedule ends at round {atk.attack_end} but the run has only {total_rounds} rounds"
        )
    ids = atk.malicious_client_ids
    return {atk.start_round + k * atk.interval: ids[k % len(ids)] for k in range(atk.injections)}


def select_clients(round_index: int, fed: FederationConfig, schedule: dict[int, int], seed: int) -> RoundPlan:
    rng = substream(seed, "selection", round_index)
    chosen = [int(c) for c in rng.choice(fed.n_total, fed.n_round, replace=False)]
    bad = schedule.get(round_index)
    if bad is not None and bad not in chosen:
        chosen[int(rng.integers(fed.n_round))] = bad
    return RoundPlan(round_index, tuple(sorted(chosen)), bad)


# ------------------------------------------------------------ local training


def client_seed(master_seed: int, client: int, round_index: int) -> int:
    return int(np.random.SeedSequence(int(master_seed), spawn_key=(1, int(client), int(round_index) & 0xFFFFFFFF)).generate_state(1)[0])


def _sgd_epochs(arch, params, batches_for, epochs, lr, momentum=0.0):
    velocity = None
    for epoch in range(epochs):
        for xb, yb in batches_for(epoch):
            _, grad = nn.loss_and_grad(arch, params, xb, yb)
            if momentum:
                params, velocity = nn.momentum_step(params, grad, velocity, lr, momentum)
            else:
                params = nn.sgd_step(params, grad, lr)
    return params


def local_train_benign(arch: nn.ModelArch, G: nn.ParamVector, dataset: Dataset, indices, lr: float, epochs: int,
                       seed: int, batch_size: int = 64, momentum: float = 0.0) -> nn.ParamVector:
    """E epochs of minibatch SGD from G; returns L - G."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        log.warning("client with no samples skipped (zero update)")
        return G.zeros_like()
    if lr == 0 or epochs == 0:
        return G.zeros_like()

    def batches(epoch):
        for b in make_batches(indices, batch_size, seed, epoch):
            yield dataset.images[b], dataset.labels[b]

    return _sgd_epochs(arch, G, batches, epochs, lr, momentum) - G


def poison_count(r: int, batch_len: int, batch_size: int) -> int:
    """r for a full batch; a short final batch keeps the ratio r / batch_size (rounded half up)."""
    if batch_len >= batch_size:
        return r
    return min(batch_len, int(r * batch_len / batch_size + 0.5))


def poison_batch(images: np.ndarray, labels: np.ndarray, k: int, mask: np.ndarray, pixel_value: float, target: int):
    """Stamp the first k samples of a batch with the trigger mask and relabel them."""
    if k == 0:
        return images, labels
    images = images.copy()
    labels = labels.copy()
    images[:k, mask, :] = pixel_value
    labels[:k] = target
    return images, labels


def local_train_malicious(arch: nn.ModelArch, G: nn.ParamVector, dataset: Dataset, indices,
                          pattern: LocalTriggerPattern, spec: GlobalTriggerSpec, atk: AttackConfig, seed: int,
                          batch_size: int = 64, momentum: float = 0.0) -> nn.ParamVector:
    """Poisoned local training; returns X - G before any scaling."""
    if atk.r > batch_size:
        raise ConfigurationError(f"poison count r={atk.r} exceeds the batch size {batch_size}")
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        log.warning("malicious client has no samples; submitting a zero update")
        return G.zeros_like()
    mask = trigger_mask(spec, pattern)

    def batches(epoch):
        for b in make_batches(indices, batch_size, seed, epoch):
            k = poison_count(atk.r, len(b), batch_size)
            yield poison_batch(dataset.images[b], dataset.labels[b], k, mask, spec.pixel_value, atk.target)

    return _sgd_epochs(arch, G, batches, atk.epochs_poison, atk.lr_poison, momentum) - G


def scale_update(update: nn.ParamVector, gamma: float) -> nn.ParamVector:
    if not gamma > 0:
        raise ConfigurationError("gamma must be > 0")
    return update * gamma


def aggregate(G: nn.ParamVector, updates, fed: FederationConfig) -> nn.ParamVector:
    """G + (eta / n_round) * sum of updates, accumulated in float64."""
    total = np.zeros(len(G), dtype=np.float64)
    for u in updates:
        try:
            G.check_layout(u)
        except LayoutError:
            raise AggregationError("update layout differs from the global model") from None
        total += u.values
    out = G.values.astype(np.float64) + (fed.eta / fed.n_round) * total
    return nn.ParamVector(out.astype(G.values.dtype), G.layout)


# ------------------------------------------------------------------- warm-up


_WARMUP_CACHE: dict[str, nn.ParamVector] = {}


def _fingerprint(fed: FederationConfig, arch: nn.ModelArch, data: FederatedData) -> str:
    h = hashlib.sha256()
    keep = dataclasses.replace(fed, total_rounds=0, workers=1)
    h.update(repr(keep).encode())
    h.update(repr(arch).encode())
    h.update(np.ascontiguousarray(data.train.images).tobytes())
    h.update(data.train.labels.tobytes())
    for ix in data.partition.client_indices:
        h.update(np.asarray(ix, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()[:24]


def _train_round(fed: FederationConfig, plan: RoundPlan, job) -> list[nn.ParamVector]:
    # each job reads only the shared snapshot and its own seeded stream
    if fed.workers > 1 and len(plan.selected) > 1:
        with ThreadPoolExecutor(max_workers=fed.workers) as pool:
            return list(pool.map(job, plan.selected))
    return [job(cid) for cid in plan.selected]


def warmup(arch: nn.ModelArch, fed: FederationConfig, data: FederatedData, cache_dir=None) -> nn.ParamVector:
    """Clean pre-training for ``fed.warmup_rounds`` rounds (indices -W..-1), memoised.

    Results are cached in memory and, with ``cache_dir``, on disk; the key
    covers everything the warm-up depends on.
    """
    key = _fingerprint(fed, arch, data)
    if key in _WARMUP_CACHE:
        return _WARMUP_CACHE[key].copy()
    path = Path(cache_dir) / f"warmup-{key}.npy" if cache_dir is not None else None
    if path is not None and path.exists():
        params = nn.ParamVector(np.load(path), arch.layout)
        _WARMUP_CACHE[key] = params
        return params.copy()
    params = nn.init_params(arch, substream(fed.master_seed, "init"))
    for t in range(-fed.warmup_rounds, 0):
        plan = select_clients(t, fed, {}, fed.master_seed)
        G = params

        def job(cid, G=G, t=t):
            return local_train_benign(arch, G, data.train, data.partition.client_indices[cid], fed.lr,
                                      fed.local_epochs, client_seed(fed.master_seed, cid, t), fed.batch_size,
                                      fed.momentum)

        params = aggregate(G, _train_round(fed, plan, job), fed)
    _WARMUP_CACHE[key] = params
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npy")
        np.save(tmp, params.values)
        tmp.replace(path)
    return params.copy()


# ------------------------------------------------------------------ the loop


def _phase(t: int, atk: AttackConfig | None) -> str:
    if atk is None or t < atk.start_round:
        return "pre-attack"
    if t <= atk.attack_end:
        return "attacking"
    return "post-attack"


def _eval_rounds(fed: FederationConfig, atk: AttackConfig | None, ev: EvalConfig) -> set[int]:
    n = fed.total_rounds
    if atk is None:
        rounds = set(range(0, n, ev.cadence_pre))
    else:
        rounds = set(range(0, min(atk.start_round, n), ev.cadence_pre))
        rounds |= set(range(atk.start_round, n, ev.cadence_post))
        rounds |= {atk.attack_end + t for t in ev.offsets if atk.attack_end + t < n}
        if atk.start_round > 0:
            rounds.add(atk.start_round - 1)
    if n > 0:
        rounds.add(n - 1)
    return rounds


def _feature_sets(test: Dataset, spec: GlobalTriggerSpec, atk: AttackConfig, ev: EvalConfig, seed: int):
    keep = test.labels != atk.target
    if ev.feature_class is not None:
        keep &= test.labels == ev.feature_class
    idx = np.flatnonzero(keep)
    if len(idx) == 0 or ev.feature_samples == 0:
        return None
    if len(idx) > ev.feature_samples:
        idx = np.sort(substream(seed, "features").choice(idx, ev.feature_samples, replace=False))
    clean = test.images[idx]
    return clean, apply_trigger(clean, LocalTriggerPattern(tuple(range(spec.m))), spec)


def run_experiment(
    fed: FederationConfig,
    atk: AttackConfig | None,
    defense: DefenseConfig | None,
    data: FederatedData,
    arch: nn.ModelArch,
    ev: EvalConfig | None = None,
    init: nn.ParamVector | None = None,
    cache_dir=None,
    on_record: Callable[[RoundRecord], None] | None = None,
) -> RunResult:
    """Run ``fed.total_rounds`` rounds and return the evaluated round records.

    Fully deterministic in ``fed.master_seed``. Rounds are numbered from 0
    after the optional warm-up; ``init`` overrides both initialisation and
    warm-up.
    """
    ev = ev or EvalConfig()
    seed = fed.master_seed
    if data.partition.n_clients != fed.n_total:
        raise ConfigurationError(f"partition has {data.partition.n_clients} clients, config says {fed.n_total}")
    if data.train.dims != arch.input_shape or data.test.dims != arch.input_shape:
        raise ConfigurationError("dataset image shape does not match the model input")

    schedule: dict[int, int] = {}
    patterns: dict[int, LocalTriggerPattern] = {}
    spec = triggered = feats = None
    if atk is not None:
        atk = resolve_attackers(atk, fed)
        schedule = attack_schedule(atk, fed.total_rounds)
        patterns = dict(zip(atk.malicious_client_ids, atk.patterns()))
        spec = atk.trigger_spec(arch.input_shape)
        triggered = asr_inputs(data.test, spec, atk.target)
        feats = _feature_sets(data.test, spec, atk, ev, seed)
    defense = defense or DefenseConfig()
    noise_seed = defense.noise_seed if defense.noise_seed is not None else seed

    if init is not None:
        params = init.copy()
    elif fed.warmup_rounds:
        params = warmup(arch, fed, data, cache_dir)
    else:
        params = nn.init_params(arch, substream(seed, "init"))

    eval_at = _eval_rounds(fed, atk, ev)
    records: list[RoundRecord] = []
    for t in range(fed.total_rounds):
        start = time.perf_counter()
        try:
            plan = select_clients(t, fed, schedule, seed)
            G = params

            def job(cid, G=G, t=t, plan=plan):
                idx = data.partition.client_indices[cid]
                cs = client_seed(seed, cid, t)
                if cid == plan.malicious:
                    return local_train_malicious(arch, G, data.train, idx, patterns[cid], spec, atk, cs, fed.batch_size,
                                                 fed.momentum)
                return local_train_benign(arch, G, data.train, idx, fed.lr, fed.local_epochs, cs, fed.batch_size,
                                          fed.momentum)

            deltas = dict(zip(plan.selected, _train_round(fed, plan, job)))
            defended = t >= defense.start_round
            clip_S = defense.clip if defended else None
            sigma = defense.sigma if defended else None

            if plan.malicious is not None:
                bad = plan.malicious
                submitted = scale_update(deltas[bad], atk.gamma)
                if atk.replacement == "exact":
                    for c, d in deltas.items():
                        if c != bad:
                            submitted = submitted - d
                if atk.clip_aware and clip_S is not None and submitted.norm() > 0:
                    submitted = submitted * (clip_S / submitted.norm())
                deltas[bad] = submitted

            updates = list(deltas.values())
            if clip_S is not None:
                updates = [clip_update(u, clip_S) for u in updates]
            params = aggregate(G, updates, fed)
            if sigma:
                params = add_noise(params, sigma, noise_seed, t)

            if t in eval_at:
                rec = RoundRecord(round=t, phase=_phase(t, atk), cda=cda(arch, params, data.test),
                                  clip_S=clip_S, noise_sigma=sigma)
                if atk is not None:
                    rec.asr = asr(arch, params, data.test, spec, atk.target, triggered=triggered)
                    if feats is not None:
                        rec.feat_dist = feature_distance(arch, params, *feats, matched=ev.feature_pairing == "matched")
                rec.wall_time = time.perf_counter() - start
                records.append(rec)
                log.info("round %d %s cda=%.4f asr=%s", t, rec.phase, rec.cda,
                         "-" if rec.asr is None else f"{rec.asr:.4f}")
                if on_record is not None:
                    on_record(rec)
        except FCBAError as exc:
            raise RoundError(t, exc) from exc
    return RunResult(records, params, atk.attack_end if atk is not None else None, schedule)
