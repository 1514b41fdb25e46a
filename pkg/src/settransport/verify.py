"""Property suites behind the `verify` command.

Each suite quantifies one family of claims over seeded random instances
and reports its worst observed violation.  Suites abort early once three
cases have failed; exceptions inside a case count as failures rather than
crashing the run, so a broken numerical core still produces a report (and
a nonzero exit code) instead of a stack trace.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attention as setattn
from . import autodiff as ad
from . import bench as bench_mod
from . import kernels
from . import model as model_mod
from . import numerics
from . import nystrom
from . import sinkhorn as sk
from . import train as train_mod

__all__ = ["SuiteResult", "ALL_SUITES", "run_verify"]

FAIL_FAST = 3


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    failures: int
    worst: float
    seconds: float
    details: dict = field(default_factory=dict)


class _Tally:
    """Failure bookkeeping shared by all suites."""

    def __init__(self):
        self.cases = 0
        self.failures = 0
        self.worst = 0.0
        self.messages = []

    def case(self, ok: bool, violation: float = 0.0, message: str = ""):
        self.cases += 1
        self.worst = max(self.worst, violation)
        if not ok:
            self.failures += 1
            if message and len(self.messages) < FAIL_FAST:
                self.messages.append(message)

    def tripped(self) -> bool:
        return self.failures >= FAIL_FAST

    def result(self, name: str, started: float, **details) -> SuiteResult:
        details = dict(details)
        if self.messages:
            details["messages"] = self.messages
        return SuiteResult(
            name=name,
            passed=self.failures == 0,
            cases=self.cases,
            failures=self.failures,
            worst=self.worst,
            seconds=time.perf_counter() - started,
            details=details,
        )


def _guard(tally: _Tally, fn, violation_of=None) -> None:
    """Run one case; an exception is a failure, not a crash."""
    try:
        ok, violation, message = fn()
    except Exception as exc:  # noqa: BLE001 - failures must be reported
        tally.case(False, 0.0, f"{type(exc).__name__}: {exc}")
        return
    tally.case(ok, violation, message)


# ---------------------------------------------------------------------------
# sinkhorn suites


def _random_cost(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    if rng.random() < 0.5:
        return rng.random((n, m))
    d = int(rng.integers(2, 9))
    x = rng.standard_normal((n, d))
    y = rng.standard_normal((m, d))
    c = np.asarray(kernels.induced_sq_distance(x, y, kernels.KernelSpec(1.0)))
    # Unit oscillation, matching the uniform half: the scaling loop's rate
    # depends on cost range over eps, and cost scale is interchangeable
    # with eps, so the grid spans range/eps in [1, 20] either way.
    return c / max(float(c.max()), 1e-12)


def _random_mass(rng: np.random.Generator, n: int) -> sk.Measure:
    if rng.random() < 0.5:
        return sk.Measure.uniform(n)
    w = rng.random(n) + 0.1
    return sk.Measure(w / w.sum())


def suite_feasibility(seed: int, threads: int = 1) -> SuiteResult:
    """1000 random instances must converge to 1e-6 marginal violation."""
    started = time.perf_counter()
    tally = _Tally()
    eps_grid = (0.05, 0.1, 0.3, 0.5, 1.0)
    case_seeds = numerics.spawn_seeds(seed, 1000)

    def run_case(i: int):
        rng = numerics.rng_from_seed(case_seeds[i])
        n = int(rng.integers(2, 65))
        m = int(rng.integers(2, 65))
        cost = _random_cost(rng, n, m)
        g = _random_mass(rng, n)
        h = _random_mass(rng, m)
        settings = sk.SinkhornSettings(eps=eps_grid[i % 5], tol=1e-6,
                                       max_iter=1000, check_every=5)
        plan = sk.sinkhorn(cost, g, h, settings)
        ok = plan.converged and plan.marginal_violation <= 1e-6 \
            and float(plan.matrix.min()) >= 0.0
        msg = "" if ok else (
            f"case {i}: converged={plan.converged} "
            f"violation={plan.marginal_violation:.3e}"
        )
        return ok, plan.marginal_violation, msg

    indices = list(range(1000))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunk = max(threads * 16, 32)
            for lo in range(0, len(indices), chunk):
                batch = indices[lo : lo + chunk]
                for outcome in pool.map(
                    lambda i: _case_outcome(run_case, i), batch
                ):
                    tally.case(*outcome)
                if tally.tripped():
                    break
    else:
        for i in indices:
            _guard(tally, lambda i=i: run_case(i))
            if tally.tripped():
                break
    return tally.result("sinkhorn-feasibility", started,
                        eps_grid=list(eps_grid))


def _case_outcome(fn, i):
    try:
        return fn(i)
    except Exception as exc:  # noqa: BLE001
        return False, 0.0, f"case {i}: {type(exc).__name__}: {exc}"


def suite_exact_consistency(seed: int, threads: int = 1) -> SuiteResult:
    """Entropic cost at eps=1e-3 tracks the enumerated optimum on n <= 5.

    Solved batched per size with a short eps-annealing schedule (0.05 down
    to 1e-3, warm-starting the potentials) so the cold-start slowdown of
    tiny eps never dominates; the fixed point at the final eps is unique,
    so annealing changes speed, not the answer.
    """
    started = time.perf_counter()
    tally = _Tally()
    rng = numerics.rng_from_seed(seed)
    per_size = 50
    final_eps = 1e-3
    for n in (2, 3, 4, 5):
        costs = rng.random((per_size, n, n))
        log_mass = np.full(n, -np.log(n))
        u = None
        for eps in (0.05, 0.01, 3e-3, final_eps):
            settings = sk.SinkhornSettings(eps=eps, tol=1e-8, max_iter=20000,
                                           check_every=25)
            warm = (u, None) if u is not None else None
            plan, u, _, _, _, violation = sk.log_domain_plan(
                costs, log_mass, log_mass, settings, warm_start=warm)
        plan = np.asarray(ad.val(plan))
        for i in range(per_size):
            def check(i=i, n=n):
                approx = float(np.sum(plan[i] * costs[i]))
                exact, _ = sk.exact_ot_uniform(costs[i])
                allowed = max(0.01 * exact, 5.0 * final_eps * np.log(n * n))
                gap = abs(approx - exact)
                ok = gap <= allowed
                msg = "" if ok else (
                    f"n={n} case {i}: |{approx:.6f} - {exact:.6f}| > {allowed:.6f}"
                )
                return ok, gap / max(allowed, 1e-30), msg

            _guard(tally, check)
            if tally.tripped():
                break
        if tally.tripped():
            break
    return tally.result("exact-consistency", started, final_eps=final_eps,
                        note="worst is gap/allowed")


def suite_wasserstein_bound(seed: int, threads: int = 1) -> SuiteResult:
    """|W - W_y| <= 2 min(W(x,y), W(x',y)) + 1e-6 on 100 random triples."""
    started = time.perf_counter()
    tally = _Tally()
    spec = kernels.KernelSpec(1.0)
    # eps chosen for robust convergence: the scaling loop's contraction
    # worsens exponentially in cost range over eps, and near-duplicate
    # points can push small-eps solves past any practical budget.  The
    # inequality under test has O(1) margins, so blur is harmless.
    settings = sk.SinkhornSettings(eps=0.3, tol=1e-8, max_iter=20000,
                                   check_every=10)
    case_seeds = numerics.spawn_seeds(seed, 100)
    for i in range(100):
        def check(i=i):
            rng = numerics.rng_from_seed(case_seeds[i])
            d = int(rng.integers(2, 6))
            x = rng.standard_normal((int(rng.integers(3, 11)), d))
            xp = rng.standard_normal((int(rng.integers(3, 11)), d))
            y = rng.standard_normal((int(rng.integers(3, 9)), d))
            w = sk.wasserstein(x, xp, spec, settings)
            w_y = sk.wasserstein_y(x, xp, y, spec, settings)
            slack = 2.0 * min(sk.wasserstein(x, y, spec, settings),
                              sk.wasserstein(xp, y, spec, settings)) + 1e-6
            excess = abs(w - w_y) - slack
            ok = excess <= 0.0
            msg = "" if ok else f"case {i}: |W-W_y| exceeds bound by {excess:.3e}"
            return ok, max(excess, 0.0), msg

        _guard(tally, check)
        if tally.tripped():
            break
    return tally.result("wasserstein-bound", started)


def suite_factored_coupling(seed: int, threads: int = 1) -> SuiteResult:
    """m * Tx Tx'^T is itself a uniform coupling, to 1e-6, on 100 pairs."""
    started = time.perf_counter()
    tally = _Tally()
    spec = kernels.KernelSpec(1.0)
    settings = sk.SinkhornSettings(eps=0.1, tol=1e-9, max_iter=20000,
                                   check_every=10)
    case_seeds = numerics.spawn_seeds(seed, 100)
    for i in range(100):
        def check(i=i):
            rng = numerics.rng_from_seed(case_seeds[i])
            d = int(rng.integers(2, 6))
            nx = int(rng.integers(2, 33))
            nxp = int(rng.integers(2, 33))
            m = int(rng.integers(2, 17))
            y = rng.standard_normal((m, d))
            cx = kernels.induced_sq_distance(rng.standard_normal((nx, d)), y, spec)
            cxp = kernels.induced_sq_distance(rng.standard_normal((nxp, d)), y, spec)
            plan_x = sk.sinkhorn(cx, settings=settings)
            plan_xp = sk.sinkhorn(cxp, settings=settings)
            coupled = sk.transport_factored(plan_x, plan_xp)
            row_gap = float(np.max(np.abs(coupled.sum(axis=1) - 1.0 / nx)))
            col_gap = float(np.max(np.abs(coupled.sum(axis=0) - 1.0 / nxp)))
            gap = max(row_gap, col_gap)
            ok = gap <= 1e-6 and float(coupled.min()) >= 0.0
            msg = "" if ok else f"case {i}: factored marginal gap {gap:.3e}"
            return ok, gap, msg

        _guard(tally, check)
        if tally.tripped():
            break
    return tally.result("factored-coupling", started)


# ---------------------------------------------------------------------------
# embedding and kernel suites


def suite_nystrom(seed: int, threads: int = 1) -> SuiteResult:
    """Full-rank exactness, and mean error shrinking as anchors grow."""
    started = time.perf_counter()
    tally = _Tally()
    case_seeds = numerics.spawn_seeds(seed, 30)
    spec = kernels.KernelSpec(1.0)
    for i in range(10):
        def exactness(i=i):
            rng = numerics.rng_from_seed(case_seeds[i])
            n = int(rng.integers(8, 25))
            d = int(rng.integers(2, 7))
            x = rng.standard_normal((n, d))
            gram = np.asarray(kernels.kernel_matrix(x, x, spec))
            nmap = nystrom.NystromMap(
                anchors=x, whitener=numerics.inv_sqrt_sym(gram, 0.0),
                spec=spec, delta=0.0)
            v = np.asarray(ad.val(nystrom.embed(nmap, x)))
            rel = float(np.linalg.norm(v @ v.T - gram) / np.linalg.norm(gram))
            ok = rel <= 1e-7
            msg = "" if ok else f"case {i}: full-rank residual {rel:.3e}"
            return ok, rel, msg

        _guard(tally, exactness)
        if tally.tripped():
            break

    ks = (4, 8, 16, 32)
    means = None
    if not tally.tripped():
        errors = np.zeros((20, len(ks)))
        spec_wide = kernels.KernelSpec(1.5)
        for s in range(20):
            rng = numerics.rng_from_seed(case_seeds[10 + s])
            x = rng.standard_normal((64, 6))
            gram = np.asarray(kernels.kernel_matrix(x, x, spec_wide))
            denom = float(np.linalg.norm(gram))
            for j, k in enumerate(ks):
                nmap = nystrom.fit_nystrom(x, k, 1e-6, spec_wide,
                                           int(case_seeds[10 + s]) + j)
                v = np.asarray(ad.val(nystrom.embed(nmap, x)))
                errors[s, j] = float(np.linalg.norm(v @ v.T - gram)) / denom
        means = errors.mean(axis=0)
        monotone = bool(np.all(np.diff(means) < 0.0))
        tally.case(monotone, 0.0 if monotone else float(np.max(np.diff(means))),
                   "" if monotone else f"anchor sweep means not decreasing: {means}")
    return tally.result(
        "nystrom-exactness", started,
        anchor_counts=list(ks),
        mean_errors=[float(v) for v in means] if means is not None else None,
    )


def suite_ky_identity(seed: int, threads: int = 1) -> SuiteResult:
    """Direct vs pooled-feature kernel evaluation, plus Gram PSD-ness."""
    started = time.perf_counter()
    tally = _Tally()
    settings = sk.SinkhornSettings(eps=0.1, tol=1e-9, max_iter=20000,
                                   check_every=10)
    case_seeds = numerics.spawn_seeds(seed, 51)
    k_dim = 5
    for i in range(50):
        def check(i=i):
            rng = numerics.rng_from_seed(case_seeds[i])
            a = rng.standard_normal((int(rng.integers(3, 13)), k_dim))
            b = rng.standard_normal((int(rng.integers(3, 13)), k_dim))
            refs = rng.standard_normal((int(rng.integers(2, 9)), k_dim))
            direct = setattn.ky_gram_direct(a, b, refs, settings)
            gram = setattn.ky_gram([a, b], refs, settings)
            fact = float(gram[0, 1])
            rel = abs(direct - fact) / max(abs(direct), abs(fact), 1e-30)
            ok = rel <= 1e-10
            msg = "" if ok else f"case {i}: direct vs factored rel gap {rel:.3e}"
            return ok, rel, msg

        _guard(tally, check)
        if tally.tripped():
            break

    if not tally.tripped():
        def psd():
            rng = numerics.rng_from_seed(case_seeds[50])
            refs = rng.standard_normal((6, k_dim))
            sets = [rng.standard_normal((int(rng.integers(4, 12)), k_dim))
                    for _ in range(8)]
            gram = setattn.ky_gram(sets, refs, settings)
            eigenvalues, _ = numerics.sym_eig(gram)
            floor = -1e-8 * float(eigenvalues[-1])
            ok = float(eigenvalues[0]) >= floor
            msg = "" if ok else f"Gram min eigenvalue {eigenvalues[0]:.3e}"
            return ok, max(0.0, floor - float(eigenvalues[0])), msg

        _guard(tally, psd)
    return tally.result("ky-identity", started)


def suite_softmax_parity(seed: int, threads: int = 1) -> SuiteResult:
    """Implicit stencil is non-negative with rows summing to one.

    Also cross-checks the softmax baseline against a naive per-row oracle
    and the positional penalty's monotone falloff.
    """
    started = time.perf_counter()
    tally = _Tally()
    settings = sk.SinkhornSettings(eps=0.1, tol=1e-9, max_iter=20000,
                                   check_every=10)
    case_seeds = numerics.spawn_seeds(seed, 72)
    spec = kernels.KernelSpec(1.0)
    for i in range(60):
        def stencil(i=i):
            rng = numerics.rng_from_seed(case_seeds[i])
            n = int(rng.integers(2, 33))
            m = int(rng.integers(2, 17))
            v = rng.standard_normal((n, 5))
            refs = rng.standard_normal((m, 5))
            cost = kernels.induced_sq_distance(v, refs, spec)
            plan = sk.sinkhorn(cost, settings=settings)
            weights = n * m * (plan.matrix @ plan.matrix.T)
            row_gap = float(np.max(np.abs(weights.sum(axis=1) - 1.0)))
            ok = float(weights.min()) >= 0.0 and row_gap <= 1e-6
            msg = "" if ok else f"case {i}: implicit row-sum gap {row_gap:.3e}"
            return ok, row_gap, msg

        _guard(tally, stencil)
        if tally.tripped():
            break

    for i in range(60, 70):
        def baseline(i=i):
            rng = numerics.rng_from_seed(case_seeds[i])
            n = int(rng.integers(2, 9))
            d = int(rng.integers(2, 7))
            q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
            out = np.asarray(ad.val(setattn.dpsa_baseline(q, k, v)))
            scores = q @ k.T / np.sqrt(d)
            naive = np.exp(scores - scores.max(axis=1, keepdims=True))
            naive = (naive / naive.sum(axis=1, keepdims=True)) @ v
            gap = float(np.max(np.abs(out - naive)))
            ok = gap <= 1e-12
            msg = "" if ok else f"case {i}: baseline vs oracle gap {gap:.3e}"
            return ok, gap, msg

        _guard(tally, baseline)
        if tally.tripped():
            break

    if not tally.tripped():
        def monotone():
            penalty = setattn.positional_matrix(17, 9, 0.37)
            rows = (np.arange(1, 18) / 17.0)[:, None]
            cols = (np.arange(1, 10) / 9.0)[None, :]
            gaps = np.abs(rows - cols)
            ok = True
            for i in range(17):
                order = np.argsort(gaps[i], kind="stable")
                values = penalty.matrix[i, order]
                ok = ok and bool(np.all(np.diff(values) <= 1e-15))
            return ok, 0.0, "" if ok else "positional falloff not monotone"

        _guard(tally, monotone)
    return tally.result("softmax-parity", started)


# ---------------------------------------------------------------------------
# gradient and counting suites


def _fd_scalar(builder, x: np.ndarray, coords, h: float = 1e-5):
    out = []
    for idx in coords:
        plus = x.copy()
        plus[idx] += h
        minus = x.copy()
        minus[idx] -= h
        out.append((float(ad.val(builder(plus))) - float(ad.val(builder(minus))))
                   / (2.0 * h))
    return np.array(out)


def _tape_grads(builder, x0: np.ndarray, coords):
    """Gradient entries of a scalar graph at the sampled coordinates."""
    leaf = ad.Var(x0)
    root = builder(leaf)
    ad.backward(root)
    return np.array([float(leaf.grad[idx]) for idx in coords])


def _primitive_cases(rng: np.random.Generator):
    """(name, x0, builder) triples; builders run on Vars and on ndarrays."""
    y = rng.standard_normal((3, 4)) + 3.0
    w = rng.standard_normal((3, 4))
    mat = rng.standard_normal((4, 2))
    wm = rng.standard_normal((3, 2))
    wc = rng.standard_normal((6, 4))
    wp = rng.standard_normal((3, 4, 8, 9))

    def weighted(op):
        return lambda x: ad.sum_(ad.mul(op(x), w))

    return [
        ("add", rng.standard_normal((3, 4)), weighted(lambda x: ad.add(x, y))),
        ("sub", rng.standard_normal((3, 4)), weighted(lambda x: ad.sub(y, x))),
        ("mul", rng.standard_normal((3, 4)), weighted(lambda x: ad.mul(x, y))),
        ("div", rng.standard_normal((3, 4)), weighted(lambda x: ad.div(x, y))),
        ("exp", 0.5 * rng.standard_normal((3, 4)), weighted(ad.exp)),
        ("log", y.copy(), weighted(ad.log)),
        ("sqrt", y.copy(), weighted(ad.sqrt)),
        ("tanh", rng.standard_normal((3, 4)), weighted(ad.tanh)),
        ("power", y.copy(), weighted(lambda x: ad.power(x, 1.7))),
        ("maximum", rng.standard_normal((3, 4)),
         weighted(lambda x: ad.maximum(x, 0.25))),
        ("matmul", rng.standard_normal((3, 4)),
         lambda x: ad.sum_(ad.mul(ad.matmul(x, mat), wm))),
        ("logsumexp", rng.standard_normal((3, 4)),
         lambda x: ad.sum_(ad.mul(ad.logsumexp(x, axis=-1), wm[:, 0]))),
        ("mean", rng.standard_normal((3, 4)),
         lambda x: ad.mul(ad.mean(x), 2.5)),
        ("reshape-transpose", rng.standard_normal((3, 4)),
         lambda x: ad.sum_(ad.mul(
             ad.reshape(ad.transpose(x, (1, 0)), (3, 4)), w))),
        ("getitem", rng.standard_normal((3, 4)),
         lambda x: ad.sum_(ad.mul(
             ad.getitem(x, (slice(0, 2), slice(1, 4))), w[:2, 1:]))),
        ("concatenate", rng.standard_normal((3, 4)),
         lambda x: ad.sum_(ad.mul(
             ad.concatenate([x, ad.mul(x, 2.0)], axis=0), wc))),
        ("pad2d", rng.standard_normal((3, 4, 6, 7)),
         lambda x: ad.sum_(ad.mul(ad.pad2d(x, 1), wp))),
    ]


def suite_gradients(seed: int, threads: int = 1) -> SuiteResult:
    """Finite differences vs the tape: primitives, then a full block."""
    started = time.perf_counter()
    tally = _Tally()
    rng = numerics.rng_from_seed(seed)
    cases = _primitive_cases(rng)
    picks = [
        [np.unravel_index(i, x0.shape)
         for i in rng.choice(x0.size, size=min(5, x0.size), replace=False)]
        for _, x0, _ in cases
    ]
    for (name, x0, builder), coords in zip(cases, picks):
        def primitive(name=name, x0=x0, builder=builder, coords=coords):
            fd = _fd_scalar(builder, x0, coords)
            adg = _tape_grads(builder, x0, coords)
            rel = np.abs(adg - fd) / np.maximum(
                np.maximum(np.abs(adg), np.abs(fd)), 1e-8)
            worst = float(rel.max())
            ok = worst < 1e-4
            msg = "" if ok else f"primitive {name}: max rel err {worst:.3e}"
            return ok, worst, msg

        _guard(tally, primitive)
        if tally.tripped():
            break

    if not tally.tripped():
        def composed():
            worst, _ = _composed_block_check(seed)
            ok = worst < 1e-4
            msg = "" if ok else f"composed block: max rel err {worst:.3e}"
            return ok, worst, msg

        _guard(tally, composed)
    return tally.result("gradients", started)


def _composed_block_check(seed: int):
    cfg = model_mod.ModelConfig(
        kind="sequence", num_classes=2, blocks=(1,), base_channels=8,
        heads=1, m=4, eps=0.1, tau=0.5, nystrom_k=4, nystrom_delta=1e-6,
        seq_len=8, input_dim=6, sinkhorn_iters=10, sinkhorn_tol=1e-6,
    )
    build_seed, data_seed, fit_seed, check_seed = numerics.spawn_seeds(seed, 4)
    model = model_mod.build(cfg, build_seed)
    rng = numerics.rng_from_seed(data_seed)
    batch = rng.standard_normal((4, cfg.seq_len, cfg.input_dim))
    batch /= np.linalg.norm(batch, axis=-1, keepdims=True)
    labels = rng.integers(0, 2, size=4)
    model_mod.fit_features(model, batch, fit_seed)
    return train_mod.fd_gradcheck(model, batch, labels, n_coords=50,
                                  h=1e-5, seed=check_seed, sinkhorn_iters=10)


def suite_scaling_counts(seed: int, threads: int = 1) -> SuiteResult:
    """Instrumented multiply-adds: linear for transport, quadratic for DPSA."""
    started = time.perf_counter()
    tally = _Tally()
    d, m, k, iters = 32, 32, 16, 10

    def set_counts():
        counts = {}
        for n in (256, 512):
            fn = bench_mod.make_set_op(n, m=m, d=d, k=k, iterations=iters,
                                       seed=seed)
            with ad.count_macs() as counter:
                fn()
            counts[n] = counter.total
        ok = counts[512] == 2 * counts[256]
        msg = "" if ok else f"transport counts {counts} are not exactly linear"
        return ok, 0.0 if ok else 1.0, msg

    def dpsa_counts():
        counts = {}
        for n in (256, 512):
            fn = bench_mod.make_dpsa_op(n, d=d, seed=seed)
            with ad.count_macs() as counter:
                fn()
            counts[n] = counter.total
            expected = 2 * n * n * d + n * n
            if counter.total != expected:
                return False, 1.0, (
                    f"dpsa count {counter.total} != analytic {expected} at n={n}"
                )
        ok = counts[512] == 4 * counts[256]
        msg = "" if ok else f"dpsa counts {counts} are not exactly quadratic"
        return ok, 0.0 if ok else 1.0, msg

    def estimate_matches():
        cfg = model_mod.ModelConfig(
            kind="sequence", num_classes=2, blocks=(1,), base_channels=16,
            heads=1, m=8, eps=0.1, tau=0.5, nystrom_k=8, seq_len=16,
            input_dim=6, sinkhorn_iters=10,
        )
        seeds = numerics.spawn_seeds(seed, 3)
        model = model_mod.build(cfg, seeds[0])
        rng = numerics.rng_from_seed(seeds[1])
        batch = rng.standard_normal((2, cfg.seq_len, cfg.input_dim))
        model_mod.fit_features(model, batch, seeds[2])
        with ad.count_macs() as counter:
            model_mod.forward(model, batch, fixed_iterations=True)
        estimate = model_mod.flops_estimate(cfg, batch_size=2)
        rel = abs(estimate - counter.total) / max(counter.total, 1)
        ok = rel <= 0.05
        msg = "" if ok else (
            f"estimate {estimate} vs instrumented {counter.total} "
            f"({100 * rel:.2f}% off)"
        )
        return ok, rel, msg

    for fn in (set_counts, dpsa_counts, estimate_matches):
        _guard(tally, fn)
    return tally.result("scaling-counts", started)


ALL_SUITES = {
    "sinkhorn-feasibility": suite_feasibility,
    "exact-consistency": suite_exact_consistency,
    "wasserstein-bound": suite_wasserstein_bound,
    "factored-coupling": suite_factored_coupling,
    "nystrom-exactness": suite_nystrom,
    "ky-identity": suite_ky_identity,
    "softmax-parity": suite_softmax_parity,
    "gradients": suite_gradients,
    "scaling-counts": suite_scaling_counts,
}


def run_verify(filter_text: str | None = None, seed: int = 0, threads: int = 1):
    """Run the selected suites; returns (results, report dict, exit code)."""
    names = [n for n in ALL_SUITES
             if filter_text is None or filter_text in n]
    if not names:
        raise ValueError(f"no suite matches filter {filter_text!r}")
    suite_seeds = numerics.spawn_seeds(seed, len(ALL_SUITES))
    seed_of = {name: suite_seeds[i] for i, name in enumerate(ALL_SUITES)}
    results = [ALL_SUITES[name](seed_of[name], threads) for name in names]
    passed = all(r.passed for r in results)
    report = {
        "seed": seed,
        "filter": filter_text,
        "passed": passed,
        "suites": [asdict(r) for r in results],
    }
    return results, report, 0 if passed else 1
