"""Built-in invariant battery: gradient checks, identities and determinism.

Loss functions are looked up through the :mod:`fcclsim.losses` module at
call time so that a patched implementation is what gets checked.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import federation, losses, models
from .data import ScenarioConfig
from .gradcheck import FD_RTOL, numeric_grad, relative_error
from .metrics import metrics_csv_text
from .numerics import kl_divergence_rows, softmax_rows


@dataclass(frozen=True)
class GradCase:
    name: str
    f: Callable[[np.ndarray], float]
    analytic: np.ndarray
    x: np.ndarray


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


def _teacher_student(rng, rows=6, classes=5):
    zt = rng.normal(size=(rows, classes)) * 2
    zs = rng.normal(size=(rows, classes)) * 2
    y = rng.integers(0, classes, rows)
    return zt, zs, y


def gradient_cases(seed: int) -> Iterator[GradCase]:
    """One analytic-vs-numeric case per differentiable objective, drawn from ``seed``."""
    rng = np.random.default_rng([seed, 9001])
    tau = float(rng.uniform(1.0, 5.0))

    z, zbar = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    lam = losses.DEFAULT_LAMBDA
    yield GradCase(
        "fccm",
        lambda v: losses.fccm_loss(losses.cross_correlation_matrix(v, zbar), lam).value,
        losses.fccm_loss(losses.cross_correlation_matrix(z, zbar), lam).grads["z_local"],
        z,
    )

    h = rng.normal(size=(7, 5))
    mu = 0.5
    s_avg = losses.instance_similarity(rng.normal(size=(7, 3)), mu)
    yield GradCase(
        "fisl",
        lambda v: losses.fisl_loss(losses.instance_similarity(v, mu), s_avg).value,
        losses.fisl_loss(losses.instance_similarity(h, mu), s_avg).grads["h_local"],
        h,
    )

    zt, zs, y = _teacher_student(rng)
    yield GradCase("ce", lambda v: losses.ce_loss(v, y).value, losses.ce_loss(zs, y).grads["z"], zs)
    yield GradCase(
        "kd",
        lambda v: losses.kd_loss(zt, v, tau).value,
        losses.kd_loss(zt, zs, tau).grads["z_student"],
        zs,
    )
    for variant in losses.FNTD_VARIANTS:
        yield GradCase(
            f"fntd[{variant}]",
            lambda v, variant=variant: losses.fntd_loss(zt, v, tau, y, variant).value,
            losses.fntd_loss(zt, zs, tau, y, variant).grads["z_student"],
            zs,
        )
    yield GradCase(
        "plain_kd composite",
        lambda v: losses.local_loss_plain_kd(v, y, zt, tau).value,
        losses.local_loss_plain_kd(zs, y, zt, tau).grads["z"],
        zs,
    )
    yield GradCase(
        "fcclplus composite",
        lambda v: losses.local_loss_fcclplus(v, y, zt, tau).value,
        losses.local_loss_fcclplus(zs, y, zt, tau).grads["z"],
        zs,
    )

    # full network: every parameter of a small heterogeneous MLP through the collaborative and local losses
    net = models.init_model([4, 6, 5], 3, np.random.default_rng([seed, 17]))
    x = rng.normal(size=(6, 4))
    labels = rng.integers(0, 3, 6)
    zbar_net = rng.normal(size=(6, 3))
    s_net = losses.instance_similarity(rng.normal(size=(6, 2)), mu)
    teacher = rng.normal(size=(6, 3))

    def net_loss(model) -> losses.LossWithGrad:
        hh, zz, cache = models.forward(model, x)
        colla = losses.collaborative_loss(zz, zbar_net, hh, s_net, lam, 3.0, mu)
        local = losses.local_loss_fcclplus(zz, labels, teacher, tau)
        grads = models.backward(model, cache, colla.grads["z_local"] + local.grads["z"], colla.grads["h_local"])
        return losses.LossWithGrad(colla.value + local.value, grads)

    analytic = net_loss(net).grads
    for name, p in net.params().items():

        def f(v, name=name):
            trial = net.copy()
            params = trial.params()
            params[name] = v
            trial.set_params(params)
            return net_loss(trial).value

        yield GradCase(f"network {name}", f, analytic[name], p)


def check_gradients(seeds: range, rtol: float = FD_RTOL) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for seed in seeds:
        for case in gradient_cases(seed):
            key = "network backward" if case.name.startswith("network") else case.name
            err = relative_error(case.analytic, numeric_grad(case.f, case.x))
            worst[key] = max(worst.get(key, 0.0), err)
    return [CheckResult(f"gradient {k}", e <= rtol, f"max rel err {e:.2e} over {len(seeds)} seeds") for k, e in worst.items()]


def check_identities(batches: int = 20) -> list[CheckResult]:
    out = []
    rng = np.random.default_rng(4242)

    worst = 0.0
    for _ in range(batches):
        zt, zs, y = _teacher_student(rng)
        tau = float(rng.uniform(0.5, 6.0))
        td, ntd = losses.decompose_kd(zt, zs, tau, y)
        worst = max(worst, abs(losses.kd_loss(zt, zs, tau).value - (td + ntd)))
    out.append(CheckResult("kd == td + ntd", worst <= 1e-12, f"max abs diff {worst:.1e}"))

    worst_kd, worst_fntd = 0.0, 0.0
    for _ in range(batches):
        zt, zs, y = _teacher_student(rng)
        tau = float(rng.uniform(0.5, 6.0))
        rows = np.arange(zs.shape[0])
        g = losses.local_loss_plain_kd(zs, y, zt, tau).grads["z"][rows, y] * zs.shape[0]
        ps, pt = softmax_rows(zs, tau), softmax_rows(zt, tau)
        ps1 = softmax_rows(zs)
        expected = (ps1[rows, y] - 1.0) + tau * (ps[rows, y] - pt[rows, y])
        worst_kd = max(worst_kd, float(np.max(np.abs(g - expected))))
        fntd = losses.fntd_loss(zt, zs, tau, y, "renormalized").grads["z_student"][rows, y]
        worst_fntd = max(worst_fntd, float(np.max(np.abs(fntd))))
    out.append(CheckResult("plain-KD target gradient formula", worst_kd <= 1e-10, f"max abs diff {worst_kd:.1e}"))
    out.append(CheckResult("FNTD target gradient is zero", worst_fntd == 0.0, f"max |grad| {worst_fntd:.1e}"))

    z, zbar = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
    a, b = rng.uniform(0.1, 10.0, (1, 4)), rng.normal(size=(1, 4))
    m1 = losses.cross_correlation_matrix(z, zbar).m
    m2 = losses.cross_correlation_matrix(z * a + b, zbar).m
    diff = float(np.max(np.abs(m1 - m2)))
    out.append(CheckResult("FCCM affine invariance", diff <= 1e-9, f"max diff {diff:.1e}"))

    h = rng.normal(size=(9, 6))
    s1 = losses.instance_similarity(h).s
    s2 = losses.instance_similarity(h * 37.5).s
    diff = float(np.max(np.abs(s1 - s2)))
    out.append(CheckResult("FISL scale invariance", diff <= 1e-10, f"max diff {diff:.1e}"))

    p = softmax_rows(rng.normal(size=(1000, 5)))
    q = softmax_rows(rng.normal(size=(1000, 5)))
    kl = np.array([kl_divergence_rows(p[i : i + 1], q[i : i + 1]) for i in range(p.shape[0])])
    out.append(CheckResult("KL non-negative", bool(np.all(kl >= -1e-15)), f"min {kl.min():.2e}"))

    hand = losses.fccm_loss(losses.CorrelationMatrix(np.ones((2, 2))), 0.0051).value
    out.append(CheckResult("FCCM hand value", abs(hand - 0.0408) <= 1e-12, f"{hand!r}"))
    return out


_SMALL = federation.FederationConfig(
    scenario=ScenarioConfig(train_sizes=(40, 30, 50, 35), test_size=30, public_size=64),
    client_widths=((12, 6), (10, 4), (14, 8), (8, 5)),
    epochs=2,
    local_rounds=1,
    pretrain_epochs=2,
    collab_batch=32,
    local_batch=16,
)


def check_determinism() -> list[CheckResult]:
    a = federation.run_experiment(_SMALL)
    b = federation.run_experiment(_SMALL)
    same = metrics_csv_text(a.log) == metrics_csv_text(b.log)
    c = federation.run_experiment(dataclasses.replace(_SMALL, parallel=True))
    dist = max(
        float(np.max(np.abs(x.model.params()[n] - y.model.params()[n])))
        for x, y in zip(a.clients, c.clients)
        for n in x.model.params()
    )
    return [
        CheckResult("dual-run metrics identical", same, "byte comparison of metrics CSV"),
        CheckResult("serial == parallel", dist <= 1e-12, f"max param diff {dist:.1e}"),
    ]


def run_all(seeds: int = 5) -> list[CheckResult]:
    return check_gradients(range(seeds)) + check_identities() + check_determinism()


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'PASS' if r.ok else 'FAIL'}  {r.name:<{width}}  {r.detail}" for r in results]
    failed = sum(not r.ok for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)


def main_verify() -> tuple[bool, str]:
    start = time.perf_counter()
    results = run_all()
    table = format_table(results)
    return all(r.ok for r in results), f"{table}\n({time.perf_counter() - start:.1f}s)"
