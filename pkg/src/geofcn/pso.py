"""Global-best particle swarm optimisation with linearly decaying inertia.

Random draws for particle ``i`` at iteration ``t`` come from a generator seeded
by ``(seed, i, t)``, so results do not depend on evaluation order or on how
fitness calls are scheduled.
"""

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Dimension:
    name: str
    min: float
    max: float
    scale: str = "linear"  # "linear" or "log"
    kind: str = "continuous"  # "continuous" or "integer"

    def __post_init__(self):
        if not self.min < self.max:
            raise ValueError(f"dimension {self.name!r}: min {self.min} must be < max {self.max}")
        if self.scale not in ("linear", "log"):
            raise ValueError(f"dimension {self.name!r}: unknown scale {self.scale!r}")
        if self.kind not in ("continuous", "integer"):
            raise ValueError(f"dimension {self.name!r}: unknown kind {self.kind!r}")
        if self.scale == "log" and self.min <= 0:
            raise ValueError(f"dimension {self.name!r}: log scale needs a positive lower bound")


@dataclass(frozen=True)
class SearchSpace:
    """Box bounds per dimension plus an optional bound on the squared position norm."""

    dims: tuple
    norm_bound: float = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        if not self.dims:
            raise ValueError("search space has no dimensions")
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate dimension names: {names}")
        if self.norm_bound is not None and not self.norm_bound > 0:
            raise ValueError("norm bound must be positive")

    @property
    def lower(self):
        return np.array([d.min for d in self.dims], dtype=np.float64)

    @property
    def upper(self):
        return np.array([d.max for d in self.dims], dtype=np.float64)

    @property
    def names(self):
        return [d.name for d in self.dims]

    @property
    def search_lower(self):
        """Lower bounds in search coordinates (log10 on log-scale dimensions)."""
        return np.array([math.log10(d.min) if d.scale == "log" else d.min for d in self.dims])

    @property
    def search_upper(self):
        return np.array([math.log10(d.max) if d.scale == "log" else d.max for d in self.dims])

    def evaluation_point(self, position):
        """Natural-unit values for a search position; integer dimensions are rounded."""
        pos = np.array(position, dtype=np.float64)
        for j, d in enumerate(self.dims):
            if d.scale == "log":
                pos[j] = 10.0 ** pos[j]
            if d.kind == "integer":
                pos[j] = np.round(pos[j])
        return pos

    def named(self, point):
        """Map a natural-unit point to ``{name: value}``, integers rounded."""
        out = {}
        for d, x in zip(self.dims, point):
            out[d.name] = int(round(float(x))) if d.kind == "integer" else float(x)
        return out

    def decode(self, position):
        """Named natural-unit values for a search-coordinate position."""
        return self.named(self.evaluation_point(position))


@dataclass(frozen=True)
class SwarmConfig:
    n_particles: int = 30
    max_iters: int = 200
    c1: float = 1.5
    c2: float = 1.5
    w_max: float = 0.9
    w_min: float = 0.4
    eps: float = 1e-6
    patience: int = 10
    v_clamp_frac: float = 0.2
    seed: int = 0
    cost_penalty: float = 0.0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.w_max >= self.w_min >= 0:
            raise ValueError("inertia endpoints must satisfy w_max >= w_min >= 0")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.v_clamp_frac > 0:
            raise ValueError("v_clamp_frac must be > 0")
        if self.cost_penalty < 0:
            raise ValueError("cost_penalty must be >= 0")


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    best_position: np.ndarray
    best_fitness: float = math.inf


@dataclass
class TraceRow:
    iteration: int
    best_fitness: float
    diagnostic: float
    inertia: float


@dataclass
class SwarmState:
    particles: list
    global_best: np.ndarray = None
    global_best_fitness: float = math.inf
    iteration: int = 0
    trace: list = field(default_factory=list)
    evaluations: int = 0
    nan_evaluations: int = 0
    converged: bool = False


def particle_rng(seed, index, iteration):
    return np.random.default_rng(np.random.SeedSequence([seed, index, iteration]))


def init_swarm(space, config):
    """Uniform positions within bounds, uniform velocities within the clamp.

    Positions live in search coordinates, so log-scale dimensions are drawn
    uniformly in log10.
    """
    if not space.dims:
        raise ValueError("search space has no dimensions")
    lo, hi = space.search_lower, space.search_upper
    vmax = config.v_clamp_frac * (hi - lo)
    particles = []
    for i in range(config.n_particles):
        rng = particle_rng(config.seed, i, 0)
        pos = np.clip(lo + rng.random(len(lo)) * (hi - lo), lo, hi)
        vel = rng.uniform(-1.0, 1.0, len(lo)) * vmax
        particles.append(Particle(pos, vel, pos.copy()))
    for p in particles:
        _apply_norm_bound(space, p)
        p.best_position = p.position.copy()
    return SwarmState(particles)


def inertia(t, config):
    """Inertia decaying linearly from ``w_max`` at t=0 to ``w_min`` at t=T."""
    if t >= config.max_iters:
        return config.w_min
    t = max(t, 0)
    return config.w_max - (config.w_max - config.w_min) * t / config.max_iters


def update_velocity(particle, global_best, w, config, rng=None, space=None, r1=None, r2=None):
    """Inertia plus cognitive and social pulls, clamped per component.

    ``r1``/``r2`` may be given explicitly; otherwise they are drawn per
    dimension from ``rng``.
    """
    x = particle.position
    n = len(x)
    if r1 is None:
        r1 = rng.random(n)
    if r2 is None:
        r2 = rng.random(n)
    v = (
        w * particle.velocity
        + config.c1 * np.asarray(r1) * (particle.best_position - x)
        + config.c2 * np.asarray(r2) * (global_best - x)
    )
    if space is not None:
        vmax = config.v_clamp_frac * (space.search_upper - space.search_lower)
        v = np.clip(v, -vmax, vmax)
    particle.velocity = v
    return v


def _apply_norm_bound(space, particle):
    if space.norm_bound is None:
        return
    sq = float(np.sum(particle.position**2))
    if sq > space.norm_bound**2:
        scaled = particle.position * (space.norm_bound / math.sqrt(sq))
        # the box wins if the ball and the box do not intersect there
        particle.position = np.clip(scaled, space.search_lower, space.search_upper)


def update_position(particle, space):
    """Step, clamp to the box (zeroing the offending velocity), then apply the norm bound.

    The norm bound rescales the whole search-coordinate vector.
    """
    x = particle.position + particle.velocity
    lo, hi = space.search_lower, space.search_upper
    out = (x < lo) | (x > hi)
    x = np.clip(x, lo, hi)
    v = particle.velocity.copy()
    v[out] = 0.0
    particle.position = x
    particle.velocity = v
    _apply_norm_bound(space, particle)
    return particle.position


class AllEvaluationsFailed(RuntimeError):
    """Every fitness evaluation returned NaN."""


def _evaluate(fitness, space, state, position):
    state.evaluations += 1
    value = fitness(space.evaluation_point(position))
    value = float(value)
    if math.isnan(value):
        state.nan_evaluations += 1
        return math.inf
    return value


def _diagnostic(state):
    return max(float(np.linalg.norm(p.velocity - p.best_position)) for p in state.particles)


def _update_global(state):
    """Lowest personal best in particle-index order; strict improvement only."""
    for p in state.particles:
        if p.best_fitness < state.global_best_fitness:
            state.global_best_fitness = p.best_fitness
            state.global_best = p.best_position.copy()


@dataclass
class PsoResult:
    best_position: np.ndarray  # natural units, as evaluated
    best_fitness: float
    trace: list
    state: SwarmState


def run(space, config, fitness, evaluate_many=None, callback=None):
    """Minimise ``fitness`` over ``space``.

    ``evaluate_many``, if given, maps a list of positions to a list of
    fitness values (e.g. through a process pool); results are consumed in
    particle-index order either way. Stops after ``patience`` consecutive
    iterations in which the global best moved less than ``eps``, or after
    ``max_iters`` iterations.
    """
    state = init_swarm(space, config)

    def score_all(positions):
        if evaluate_many is None:
            return [_evaluate(fitness, space, state, x) for x in positions]
        raw = evaluate_many([space.evaluation_point(x) for x in positions])
        out = []
        for value in raw:
            state.evaluations += 1
            value = float(value)
            if math.isnan(value):
                state.nan_evaluations += 1
                value = math.inf
            out.append(value)
        return out

    for p, f in zip(state.particles, score_all([p.position for p in state.particles])):
        p.best_fitness = f
        p.best_position = p.position.copy()
    _update_global(state)
    if state.global_best is None:
        state.global_best = state.particles[0].best_position.copy()
    state.trace.append(TraceRow(0, state.global_best_fitness, _diagnostic(state), inertia(0, config)))

    stall = 0
    for t in range(config.max_iters):
        w = inertia(t, config)
        previous = state.global_best.copy()
        for i, p in enumerate(state.particles):
            rng = particle_rng(config.seed, i, t + 1)
            update_velocity(p, state.global_best, w, config, rng, space)
            update_position(p, space)
        scores = score_all([p.position for p in state.particles])
        for p, f in zip(state.particles, scores):
            if f < p.best_fitness:
                p.best_fitness = f
                p.best_position = p.position.copy()
        _update_global(state)
        if state.global_best is None:
            state.global_best = previous
        state.iteration = t + 1
        state.trace.append(TraceRow(t + 1, state.global_best_fitness, _diagnostic(state), w))
        if callback is not None:
            callback(state)
        if float(np.linalg.norm(state.global_best - previous)) < config.eps:
            stall += 1
            if stall >= config.patience:
                state.converged = True
                break
        else:
            stall = 0

    if state.nan_evaluations == state.evaluations:
        raise AllEvaluationsFailed(f"all {state.evaluations} fitness evaluations returned NaN")
    return PsoResult(space.evaluation_point(state.global_best), state.global_best_fitness, state.trace, state)


def trace_csv(trace):
    lines = ["iter,best_fitness,eq10_diag,w"]
    for row in trace:
        lines.append(f"{row.iteration},{row.best_fitness!r},{row.diagnostic!r},{row.inertia!r}")
    return "\n".join(lines) + "\n"


def position_fragment(space, point):
    """``key=value`` lines for a natural-unit point, integers rounded."""
    return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in space.named(point).items())


# --- benchmark objectives ---------------------------------------------------------


def sphere(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(x * x))


def rastrigin(x):
    x = np.asarray(x, dtype=np.float64)
    return float(10.0 * len(x) + np.sum(x * x - 10.0 * np.cos(2.0 * np.pi * x)))
