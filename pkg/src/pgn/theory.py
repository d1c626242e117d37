"""Finite-game checks of the optimal-discriminator and convergence results.

The continuous statements are about densities over perturbed images.  Here
the image space is a finite set of atoms ``J_1..J_S``; each atom carries its
own success probability ``p_g(J_s)`` and discriminator value ``d_s``, and
every statement is checked atom by atom.
"""

from dataclasses import dataclass

import numpy as np

from pgn import diffcore as dc
from pgn.models import LayerSpec, NetworkSpec, build_discriminator
from pgn.train import CE_CLAMP, CROSS_ENTROPY, LEAST_SQUARES, canonical_variant, discriminator_loss

GRID = np.linspace(0.0, 1.0, 1001)


@dataclass
class DiscreteGame:
    p_g: np.ndarray
    d: np.ndarray = None

    def __post_init__(self):
        self.p_g = np.asarray(self.p_g, dtype=np.float64)
        if self.d is None:
            self.d = np.full_like(self.p_g, 0.5)
        self.d = np.asarray(self.d, dtype=np.float64)
        for name, arr in (("p_g", self.p_g), ("d", self.d)):
            if np.any((arr < 0) | (arr > 1)):
                raise ValueError(f"{name} values must lie in [0, 1]")

    @classmethod
    def random(cls, rng, size):
        return cls(rng.uniform(0.0, 1.0, size=size))


def pointwise_discriminator_loss(d, p, variant=LEAST_SQUARES):
    """Per-atom discriminator risk at value ``d`` when ``P(g=1) = p``."""
    d, p = np.asarray(d, dtype=np.float64), np.asarray(p, dtype=np.float64)
    if canonical_variant(variant) == LEAST_SQUARES:
        return p * (d - 1.0) ** 2 + (1.0 - p) * d**2
    dc_ = np.clip(d, CE_CLAMP, 1.0 - CE_CLAMP)
    return -(p * np.log(dc_) + (1.0 - p) * np.log(1.0 - dc_))


def pointwise_generator_loss(p, variant=LEAST_SQUARES):
    """Generator risk per atom once the discriminator sits at its optimum d = p."""
    p = np.asarray(p, dtype=np.float64)
    if canonical_variant(variant) == LEAST_SQUARES:
        return (p - 1.0) ** 2
    return -np.log(np.clip(p, CE_CLAMP, 1.0))


def generator_gradient(p, variant=LEAST_SQUARES):
    """d/dp of :func:`pointwise_generator_loss` (always <= 0 on (0, 1])."""
    p = np.asarray(p, dtype=np.float64)
    if canonical_variant(variant) == LEAST_SQUARES:
        return 2.0 * (p - 1.0)
    return -1.0 / np.clip(p, CE_CLAMP, 1.0)


def optimal_discriminator(game, variant=LEAST_SQUARES):
    """Analytic optimum ``d* = p_g`` and the grid-search minimiser per atom."""
    analytic = game.p_g.copy()
    risk = pointwise_discriminator_loss(GRID[None, :], game.p_g[:, None], variant)
    grid = GRID[np.argmin(risk, axis=1)]
    return analytic, grid


def ls_loss_decomposition(game):
    """Direct least-squares risk and its ``sum (d - p)^2 + C`` rewrite, per atom.

    ``C = p - p^2`` depends only on the game; the two arrays must agree.
    """
    direct = pointwise_discriminator_loss(game.d, game.p_g, LEAST_SQUARES)
    rewritten = (game.d - game.p_g) ** 2 + (game.p_g - game.p_g**2)
    return direct, rewritten


@dataclass
class DescentResult:
    trajectory: np.ndarray  # (iters + 1, atoms)
    losses: np.ndarray  # (iters + 1,) mean generator risk
    oscillated: bool

    @property
    def final(self):
        return self.trajectory[-1]


def generator_descent(p0, step=0.1, iters=200, variant=LEAST_SQUARES):
    """Projected gradient descent on p_g with the discriminator held at d = p_g."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    p = np.atleast_1d(np.asarray(p0, dtype=np.float64)).copy()
    if np.any((p <= 0) | (p > 1)):
        raise ValueError("starting p_g must lie in (0, 1]")
    traj = [p.copy()]
    for _ in range(iters):
        d = p  # optimal discriminator for the current generator
        p = np.clip(d - step * generator_gradient(d, variant), 0.0, 1.0)
        traj.append(p.copy())
    traj = np.array(traj)
    losses = pointwise_generator_loss(traj, variant).mean(axis=1)
    oscillated = bool(np.any(np.diff(traj, axis=0) < -1e-12))
    return DescentResult(traj, losses, oscillated)


# ---------------------------------------------------------------- trained discriminator


def _probe_spec(input_shape):
    layers = [
        LayerSpec("conv", 4, 3, 2, 1, "relu"),
        LayerSpec("gap"),
        LayerSpec("dense", 1, activation="sigmoid"),
    ]
    return NetworkSpec("probe_discriminator", "discriminator", tuple(input_shape), layers)


@dataclass
class OptimumCheck:
    p: float
    variant: str
    output: float
    deviation: float
    steps: int
    converged: bool


def empirical_optimum_check(
    p,
    variant=LEAST_SQUARES,
    copies=40,
    input_shape=(3, 8, 8),
    lr=0.01,
    max_steps=3000,
    tol=0.02,
    seed=0,
):
    """Train a discriminator alone on one image repeated ``copies`` times,
    a fraction ``p`` of which carry target 1; report how far its output
    lands from ``p``.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    rng = dc.make_rng(seed)
    image = rng.uniform(0.0, 1.0, size=(1,) + tuple(input_shape)).astype(np.float32)
    batch = dc.Tensor(np.repeat(image, copies, axis=0))
    positives = int(round(p * copies))
    g = np.zeros(copies)
    g[:positives] = 1
    D = build_discriminator(_probe_spec(input_shape), init="fresh", rng=rng)
    opt = dc.Adam(D.parameters(), lr=lr)
    target = positives / copies
    out = float("nan")
    steps = 0
    stable = 0
    for steps in range(1, max_steps + 1):
        opt.zero_grad()
        o = D(batch)
        out = float(o.data.mean())
        # done once the output has stayed inside a quarter of the tolerance for a while
        stable = stable + 1 if abs(out - target) < tol / 4 else 0
        if stable >= 50:
            break
        dc.backward(discriminator_loss(o, g, variant))
        opt.step()
    out = float(D(batch).data.mean())
    dev = abs(out - p)
    return OptimumCheck(p, canonical_variant(variant), out, dev, steps, dev <= tol)


# ---------------------------------------------------------------- report


@dataclass
class CheckResult:
    name: str
    passed: bool
    deviation: float
    tolerance: float

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<52} max_dev={self.deviation:.3e}  tol={self.tolerance:g}"


def verify_theory(seed=0, games=100, atoms=16, include_training=True):
    """Run every finite-game check and return a list of :class:`CheckResult`."""
    rng = dc.make_rng(seed)
    results = []
    for variant in (LEAST_SQUARES, CROSS_ENTROPY):
        worst = 0.0
        for _ in range(games):
            analytic, grid = optimal_discriminator(DiscreteGame.random(rng, atoms), variant)
            worst = max(worst, float(np.max(np.abs(analytic - grid))))
        results.append(CheckResult(f"optimal discriminator d*=p_g ({variant})", worst <= 1e-3, worst, 1e-3))

    worst = 0.0
    for _ in range(games):
        game = DiscreteGame(rng.uniform(0, 1, atoms), rng.uniform(0, 1, atoms))
        direct, rewritten = ls_loss_decomposition(game)
        worst = max(worst, float(np.max(np.abs(direct - rewritten))))
    results.append(CheckResult("least-squares risk = (d-p)^2 + C", worst <= 1e-12, worst, 1e-12))

    starts = np.round(np.arange(0.1, 1.0, 0.1), 1)
    for variant in (LEAST_SQUARES, CROSS_ENTROPY):
        res = generator_descent(starts, step=0.1, iters=200, variant=variant)
        gap = float(np.max(1.0 - res.final))
        monotone = not res.oscillated and bool(np.all(np.diff(res.losses) <= 1e-12))
        results.append(
            CheckResult(f"generator descent p_g -> 1 ({variant})", gap < 1e-3 and monotone, gap, 1e-3)
        )

    if include_training:
        for variant in (LEAST_SQUARES, CROSS_ENTROPY):
            for p in (0.25, 0.5, 1.0):
                chk = empirical_optimum_check(p, variant, seed=seed)
                results.append(
                    CheckResult(f"trained D output -> p={p} ({variant})", chk.converged, chk.deviation, 0.02)
                )
    return results


def format_report(results):
    lines = [r.line() for r in results]
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
