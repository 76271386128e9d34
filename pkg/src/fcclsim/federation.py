"""Communication-epoch orchestration for heterogeneous federated learning.

Each epoch runs a collaborative phase on the unlabeled public pool, where
every client aligns with targets averaged over all clients, followed by a
local phase on private data that distills from the client's own snapshot
of the previous epoch. Strategies swap the losses used in either phase.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import losses
from .data import AUGMENT_MODES, DomainDataset, PublicPool, ScenarioConfig, augment, batch_indices, generate_scenario
from .errors import ConfigError, NumericAbort, StateError
from .metrics import MetricsRecord, evaluate_clients
from .models import AdamState, ClientModel, Snapshot, apply_gradients, backward, build_scenario_models, forward
from .seeding import derive_seed

log = logging.getLogger(__name__)

STRATEGIES = ("fcclplus", "fccl", "fedmd", "feddf", "plain_kd", "solo", "ewc", "fedavg_homog")
# strategies whose collaborative phase uses FCCM (+ omega * FISL)
_CORRELATION_STRATEGIES = ("fcclplus", "fccl", "plain_kd", "ewc", "fedavg_homog")


@dataclass(frozen=True)
class FederationConfig:
    strategy: str = "fcclplus"
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    # hidden + feature widths per client; the input width comes from the scenario
    client_widths: tuple[tuple[int, ...], ...] = ((32, 8), (48, 12), (24, 10), (40, 16))
    activation: str = "tanh"
    epochs: int = 20
    local_rounds: int = 5
    collab_passes: int = 1
    pretrain_epochs: int = 50
    collab_batch: int = 128
    local_batch: int = 32
    lr: float = 0.001
    lam: float = losses.DEFAULT_LAMBDA
    mu: float = losses.DEFAULT_MU
    omega: float = losses.DEFAULT_OMEGA
    tau: float = losses.DEFAULT_TAU
    fntd_variant: str = "renormalized"
    ewc_lambda: float = 0.7
    augment: str = "weak"
    seed: int = 7
    parallel: bool = False

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}", "strategy")
        try:
            self.scenario.validate()
        except ValueError as exc:
            raise ConfigError(str(exc), "scenario") from exc
        if len(self.client_widths) != self.scenario.domains:
            raise ConfigError(f"{len(self.client_widths)} client models for {self.scenario.domains} domains", "client_widths")
        if any(len(w) < 1 or min(w) < 1 for w in self.client_widths):
            raise ConfigError("every client needs at least one layer of width >= 1", "client_widths")
        checks = [
            (self.epochs >= 0, "epochs", "must be >= 0"),
            (self.local_rounds >= 0, "local_rounds", "must be >= 0"),
            (self.collab_passes >= 0, "collab_passes", "must be >= 0"),
            (self.pretrain_epochs >= 0, "pretrain_epochs", "must be >= 0"),
            (self.collab_batch >= 2, "collab_batch", "must be >= 2"),
            (self.local_batch >= 2, "local_batch", "must be >= 2"),
            (self.lr > 0, "lr", "must be positive"),
            (self.lam > 0, "lambda", "must be positive"),
            (self.mu > 0, "mu", "must be positive"),
            (self.omega >= 0, "omega", "must be >= 0"),
            (self.tau > 0, "tau", "must be positive"),
            (self.ewc_lambda >= 0, "ewc_lambda", "must be >= 0"),
            (self.fntd_variant in losses.FNTD_VARIANTS, "fntd_variant", f"must be one of {losses.FNTD_VARIANTS}"),
            (self.augment in AUGMENT_MODES, "augment", f"must be one of {AUGMENT_MODES}"),
            (self.activation in ("tanh", "relu"), "activation", "must be tanh or relu"),
            (self.seed >= 0, "seed", "must be >= 0"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise ConfigError(msg, name)
        if self.strategy in ("fccl", "ewc") and self.pretrain_epochs <= 0:
            raise ConfigError(f"strategy {self.strategy} needs pretrain_epochs > 0", "pretrain_epochs")
        if self.strategy == "fedavg_homog" and len(set(self.client_widths)) != 1:
            raise ConfigError("fedavg_homog needs identical client architectures", "client_widths")

    def layer_specs(self) -> list[list[int]]:
        return [[self.scenario.input_dim, *w] for w in self.client_widths]


@dataclass
class ClientState:
    model: ClientModel
    adam_collab: AdamState
    adam_local: AdamState
    teacher: Snapshot
    domain_id: int
    pretrained: Snapshot | None = None
    fisher: dict | None = None


def _check_finite(value: float, **where) -> None:
    if not math.isfinite(value):
        raise NumericAbort(f"non-finite loss {value} at {where}", {"loss": value, **where})


def _checked_forward(model, x: np.ndarray, **where):
    """Forward pass that turns overflowing activations into a diagnostic abort."""
    with np.errstate(over="ignore", invalid="ignore"):
        h, z, cache = forward(model, x)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(z))):
        raise NumericAbort(f"non-finite activations at {where}", {"loss": math.nan, **where})
    return h, z, cache


def _checked_step(model: ClientModel, adam: AdamState, grads: dict, **where) -> None:
    with np.errstate(over="ignore", invalid="ignore"):
        apply_gradients(model, adam, grads)
    bad = [n for n, p in model.params().items() if not np.all(np.isfinite(p))]
    if bad:
        raise NumericAbort(f"non-finite parameters {bad} at {where}", {"loss": math.nan, "params": bad, **where})


def _map_clients(fn: Callable[[int], float], count: int, parallel: bool) -> list[float]:
    if parallel and count > 1:
        with ThreadPoolExecutor(max_workers=count) as pool:
            return list(pool.map(fn, range(count)))
    return [fn(i) for i in range(count)]


# ---------------------------------------------------------------------------
# Collaborative phase


def collaborative_grads(
    strategy: str, z: np.ndarray, h: np.ndarray, z_avg: np.ndarray, s_avg: np.ndarray | None, cfg: FederationConfig
) -> losses.LossWithGrad:
    """Loss on one public batch for one client; grads keyed ``z`` and ``h``."""
    if strategy in _CORRELATION_STRATEGIES:
        omega = 0.0 if strategy == "fccl" else cfg.omega
        res = losses.collaborative_loss(z, z_avg, h, s_avg, cfg.lam, omega, cfg.mu)
        return losses.LossWithGrad(res.value, {"z": res.grads["z_local"], "h": res.grads["h_local"]})
    if strategy == "feddf":
        res = losses.feddf_loss(z, z_avg)
    elif strategy == "fedmd":
        res = losses.fedmd_loss(z, z_avg)
    else:
        raise ConfigError(f"strategy {strategy!r} has no collaborative loss", "strategy")
    return losses.LossWithGrad(res.value, {"z": res.grads["z_local"]})


def run_collaborative_phase(
    clients: Sequence[ClientState], public_pool: PublicPool, cfg: FederationConfig, epoch: int, parallel: bool | None = None
) -> float:
    """One or more passes over the public pool; returns the mean per-client batch loss.

    For every batch all clients first run forward, the server averages their
    logits (and similarity matrices), and only then does any client step.
    """
    if len(clients) < 2:
        raise ConfigError("collaborative updating needs at least 2 clients", "domains")
    if cfg.strategy == "solo" or cfg.collab_passes == 0:
        return math.nan
    parallel = cfg.parallel if parallel is None else parallel
    use_similarity = cfg.strategy in _CORRELATION_STRATEGIES and cfg.strategy != "fccl" and cfg.omega > 0
    batch_seed = derive_seed(cfg.seed, "collab-batches")
    aug_seed = derive_seed(cfg.seed, "augment")
    total, count = 0.0, 0
    for p in range(cfg.collab_passes):
        order = batch_indices(public_pool.x.shape[0], cfg.collab_batch, batch_seed, epoch * cfg.collab_passes + p)
        for b, idx in enumerate(order):
            xb = augment(public_pool.x[idx], cfg.augment, [aug_seed, epoch, p, b])
            where = {"epoch": epoch, "phase": "collaborative", "strategy": cfg.strategy}
            outs = [_checked_forward(c.model, xb, client=c.domain_id, **where) for c in clients]
            # average in domain order so the targets do not depend on list order
            canon = sorted(range(len(clients)), key=lambda i: clients[i].domain_id)
            z_avg = np.mean([outs[i][1] for i in canon], axis=0)
            s_avg = None
            if use_similarity:
                s_avg = np.mean([losses.instance_similarity(outs[i][0], cfg.mu).s for i in canon], axis=0)

            def update(i: int) -> float:
                h, z, cache = outs[i]
                res = collaborative_grads(cfg.strategy, z, h, z_avg, s_avg, cfg)
                _check_finite(res.value, client=clients[i].domain_id, **where)
                grads = backward(clients[i].model, cache, res.grads["z"], res.grads.get("h"))
                _checked_step(clients[i].model, clients[i].adam_collab, grads, client=clients[i].domain_id, **where)
                return res.value

            values = _map_clients(update, len(clients), parallel)
            total += sum(values)
            count += len(values)
    return total / count if count else math.nan


def run_strategy_feddf(clients, public_pool, cfg, epoch, parallel=None) -> float:
    return run_collaborative_phase(clients, public_pool, replace(cfg, strategy="feddf"), epoch, parallel)


def run_strategy_fedmd(clients, public_pool, cfg, epoch, parallel=None) -> float:
    return run_collaborative_phase(clients, public_pool, replace(cfg, strategy="fedmd"), epoch, parallel)


def run_strategy_fedavg_homog(clients: Sequence[ClientState], cfg: FederationConfig | None = None, epoch: int = 0) -> None:
    """Replace every client's parameters by the element-wise mean across clients."""
    shapes = clients[0].model.shapes()
    if any(c.model.shapes() != shapes for c in clients):
        raise ConfigError("parameter averaging needs structurally identical clients", "client_widths")
    names = list(shapes)
    mean = {n: np.mean([c.model.params()[n] for c in clients], axis=0) for n in names}
    for c in clients:
        c.model.set_params({n: v.copy() for n, v in mean.items()})


# ---------------------------------------------------------------------------
# Local phase


def _ce_grads(model: ClientModel, x: np.ndarray, y: np.ndarray, **where) -> tuple[float, dict]:
    _, z, cache = _checked_forward(model, x, **where)
    res = losses.ce_loss(z, y)
    return res.value, backward(model, cache, res.grads["z"])


def empirical_fisher(model: ClientModel | Snapshot, x: np.ndarray, y: np.ndarray) -> dict:
    """Diagonal empirical Fisher: mean over samples of squared per-sample CE gradients."""
    net = model.restore() if isinstance(model, Snapshot) else model
    fisher = {n: np.zeros_like(p) for n, p in net.params().items()}
    for k in range(x.shape[0]):
        _, g = _ce_grads(net, x[k : k + 1], y[k : k + 1])
        for n in fisher:
            fisher[n] += g[n] * g[n]
    return {n: f / x.shape[0] for n, f in fisher.items()}


def local_objective(state: ClientState, cfg: FederationConfig, x: np.ndarray, y: np.ndarray) -> tuple[float, dict]:
    """Strategy-specific private-data loss and parameter gradients for one batch."""
    model = state.model
    _, z, cache = _checked_forward(model, x, phase="local", client=state.domain_id, strategy=cfg.strategy)
    strategy = cfg.strategy
    extra = None
    if strategy in ("fcclplus", "fedavg_homog"):
        _, zt, _ = _checked_forward(state.teacher, x, phase="local", client=state.domain_id, teacher=True)
        res = losses.local_loss_fcclplus(z, y, zt, cfg.tau, cfg.fntd_variant)
    elif strategy == "plain_kd":
        _, zt, _ = _checked_forward(state.teacher, x, phase="local", client=state.domain_id, teacher=True)
        res = losses.local_loss_plain_kd(z, y, zt, cfg.tau)
    elif strategy == "fccl":
        _, zt, _ = _checked_forward(state.teacher, x, phase="local", client=state.domain_id, teacher=True)
        _, zp, _ = _checked_forward(state.pretrained, x, phase="local", client=state.domain_id, pretrained=True)
        res = losses.local_loss_fccl_dual_teacher(z, y, zt, zp, cfg.tau)
    else:
        res = losses.ce_loss(z, y)
        if strategy == "ewc":
            extra = losses.ewc_penalty(
                model.params(), state.pretrained.params(), state.fisher, cfg.ewc_lambda
            )
    grads = backward(model, cache, res.grads["z"])
    value = res.value
    if extra is not None:
        value += extra.value
        grads = {n: g + extra.grads[n] for n, g in grads.items()}
    return value, grads


def run_local_phase(state: ClientState, private: DomainDataset, cfg: FederationConfig, epoch: int) -> float:
    """T passes over private data, then refresh the teacher snapshot. Returns mean batch loss."""
    if state.teacher.epoch_tag != epoch - 1:
        raise StateError(f"teacher snapshot is from epoch {state.teacher.epoch_tag}, expected {epoch - 1}")
    if cfg.strategy in ("fccl", "ewc") and state.pretrained is None:
        raise ConfigError(f"strategy {cfg.strategy} needs a pretrained snapshot", "pretrain_epochs")
    if cfg.strategy == "ewc" and state.fisher is None:
        raise ConfigError("strategy ewc needs a Fisher estimate", "pretrain_epochs")
    seed = derive_seed(cfg.seed, "local-batches", state.domain_id)
    total, count = 0.0, 0
    for t in range(cfg.local_rounds):
        for idx in batch_indices(private.train_x.shape[0], cfg.local_batch, seed, epoch * cfg.local_rounds + t):
            value, grads = local_objective(state, cfg, private.train_x[idx], private.train_y[idx])
            where = {"epoch": epoch, "phase": "local", "client": state.domain_id, "strategy": cfg.strategy}
            _check_finite(value, **where)
            _checked_step(state.model, state.adam_local, grads, **where)
            total += value
            count += 1
    state.teacher = Snapshot.of(state.model, epoch)
    return total / count if count else math.nan


def pretrain_solo(state: ClientState, private: DomainDataset, cfg: FederationConfig) -> float:
    """Isolated cross-entropy training; leaves teacher and pretrained snapshots tagged epoch 0."""
    seed = derive_seed(cfg.seed, "pretrain-batches", state.domain_id)
    total, count = 0.0, 0
    for ep in range(cfg.pretrain_epochs):
        for idx in batch_indices(private.train_x.shape[0], cfg.local_batch, seed, ep):
            where = {"epoch": 0, "phase": "pretrain", "client": state.domain_id, "strategy": cfg.strategy}
            value, grads = _ce_grads(state.model, private.train_x[idx], private.train_y[idx], **where)
            _check_finite(value, **where)
            _checked_step(state.model, state.adam_local, grads, **where)
            total += value
            count += 1
    snap = Snapshot.of(state.model, 0)
    state.teacher = snap
    state.pretrained = snap
    if cfg.strategy == "ewc":
        state.fisher = empirical_fisher(snap, private.train_x, private.train_y)
    return total / count if count else math.nan


# ---------------------------------------------------------------------------
# Experiment driver


@dataclass
class ExperimentResult:
    log: list[MetricsRecord]
    clients: list[ClientState]
    domains: list[DomainDataset]
    public_pool: PublicPool


def init_clients(cfg: FederationConfig) -> list[ClientState]:
    models = build_scenario_models(cfg.layer_specs(), cfg.scenario.classes, derive_seed(cfg.seed, "init"), cfg.activation)
    return [
        ClientState(m, AdamState(lr=cfg.lr), AdamState(lr=cfg.lr), Snapshot.of(m, 0), domain_id=i)
        for i, m in enumerate(models)
    ]


def run_experiment(
    cfg: FederationConfig,
    on_epoch: Callable[[int, list[ClientState], PublicPool], None] | None = None,
) -> ExperimentResult:
    """SOLO pretraining, then ``epochs`` rounds of collaborative and local updating.

    Metrics are recorded after pretraining and after each phase. ``on_epoch``
    is invoked after every local phase (used for correlation dumps).
    """
    cfg.validate()
    domains, pool = generate_scenario(cfg.scenario)
    tests = [(d.test_x, d.test_y) for d in domains]
    clients = init_clients(cfg)

    def record(epoch: int, phase: str, collab: float = math.nan, local: float = math.nan) -> None:
        intra, inter = evaluate_clients([c.model for c in clients], tests)
        records.append(MetricsRecord(epoch, phase, intra, inter, collab, local))

    records: list[MetricsRecord] = []
    pre = [pretrain_solo(c, domains[c.domain_id], cfg) for c in clients]
    record(0, "pretrain", local=float(np.mean(pre)) if cfg.pretrain_epochs else math.nan)
    for epoch in range(1, cfg.epochs + 1):
        collab = run_collaborative_phase(clients, pool, cfg, epoch)
        if cfg.strategy == "fedavg_homog":
            run_strategy_fedavg_homog(clients, cfg, epoch)
        record(epoch, "post-collab", collab=collab)
        local = float(np.mean([run_local_phase(c, domains[c.domain_id], cfg, epoch) for c in clients]))
        record(epoch, "post-local", collab=collab, local=local)
        log.debug("epoch %d: inter %.4f intra %.4f", epoch, records[-1].inter_avg, records[-1].intra_avg)
        if on_epoch is not None:
            on_epoch(epoch, clients, pool)
    return ExperimentResult(records, clients, domains, pool)


def correlation_matrices(clients: Sequence[ClientState], public_pool: PublicPool, batch: int) -> list[losses.CorrelationMatrix]:
    """Each client's cross-correlation with the client average on the first public batch."""
    x = public_pool.x[:batch]
    zs = [forward(c.model, x)[1] for c in clients]
    z_avg = np.mean(zs, axis=0)
    return [losses.cross_correlation_matrix(z, z_avg) for z in zs]
