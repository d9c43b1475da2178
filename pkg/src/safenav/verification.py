"""Complete verification of forbidden-action safety properties.

A property asks: does any observation inside a 16-dimensional box make the
policy's greedy action equal a designated forbidden action?  SAT answers
carry a concrete witness (re-checked by plain forward evaluation before
being returned); UNSAT means no such input exists over the box; UNKNOWN is
returned only on resource exhaustion, never as a wrong verdict.

The decision procedure is branch-and-bound over input sub-boxes:

  * symbolic linear bounds (affine in the 16 inputs) are pushed through
    the network -- affine layers compose exactly, stable ReLUs pass
    through or zero out, unstable ReLUs get the chord upper bound and a
    0/1-slope lower bound chosen by |lb| vs |ub|;
  * a sub-box is pruned when some other logit provably exceeds the
    forbidden one everywhere on it;
  * projected gradient ascent on the logit margin (plus corner probes)
    hunts for witnesses and short-circuits the search on success;
  * otherwise the widest input interval is split at its midpoint.

Greedy selection breaks ties toward the lowest action index, exactly as
the policy head does; ties therefore count as violations only when the
forbidden action wins them.

`grid_certify` is an independent brute-force oracle (dense grid plus a
Lipschitz argument) used to cross-check verdicts on small properties.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, fields, replace

import numpy as np
from sklearn.base import BaseEstimator

from .ioutil import atomic_write_text
from .network import (N_ACTIONS, OBS_SIZE, GradientTape, PolicyNetwork,
                      backprop, greedy_action)
from .validation import check_action, check_box

BUILTIN_PROPERTY_NAMES = ("theta_up", "theta_down", "theta_left", "theta_right")

BRIGHT = (0.8, 1.0)   # close to the wall on that side
SAFE = (0.0, 0.6)     # unobstructed image area


@dataclass
class SafetyProperty:
    """Input box (16 closed intervals in [0,1]) plus one forbidden action."""

    name: str
    box: np.ndarray
    forbidden_action: int

    def __post_init__(self):
        self.box = check_box(self.box, name=f"{self.name}.box")
        self.forbidden_action = check_action(self.forbidden_action,
                                             name=f"{self.name}.forbidden_action")

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool((x >= self.box[:, 0] - atol).all()
                    and (x <= self.box[:, 1] + atol).all())

    @property
    def active_dims(self) -> np.ndarray:
        return np.nonzero(self.box[:, 1] > self.box[:, 0])[0]

    def with_box(self, box) -> "SafetyProperty":
        return SafetyProperty(self.name, box, self.forbidden_action)

    def to_dict(self) -> dict:
        return {"name": self.name, "box": self.box.tolist(),
                "forbidden_action": self.forbidden_action}

    @classmethod
    def from_dict(cls, doc: dict, source: str = "<dict>") -> "SafetyProperty":
        for key in ("name", "box", "forbidden_action"):
            if key not in doc:
                raise ValueError(f"{source}: property missing field '{key}'")
        return cls(doc["name"], np.asarray(doc["box"], dtype=np.float64),
                   doc["forbidden_action"])


def _banded_box(bright_cells) -> np.ndarray:
    box = np.tile(np.asarray(SAFE), (OBS_SIZE, 1))
    for c in bright_cells:
        box[c] = BRIGHT
    return box


def builtin_properties() -> list[SafetyProperty]:
    """The four bright-side properties; cell 0 is the image's upper-left.

    A bright top row forbids moving up (action 1), bottom row forbids down
    (2), left column forbids left (4), right column forbids right (3).
    """
    return [
        SafetyProperty("theta_up", _banded_box((0, 1, 2, 3)), 1),
        SafetyProperty("theta_down", _banded_box((12, 13, 14, 15)), 2),
        SafetyProperty("theta_left", _banded_box((0, 4, 8, 12)), 4),
        SafetyProperty("theta_right", _banded_box((3, 7, 11, 15)), 3),
    ]


def save_properties(path, properties):
    doc = [p.to_dict() for p in properties]
    atomic_write_text(path, json.dumps(doc, indent=1) + "\n")


def load_properties(path) -> list[SafetyProperty]:
    with open(path, "r") as f:
        doc = json.load(f)
    if not isinstance(doc, list):
        raise ValueError(f"{path}: expected a list of properties")
    return [SafetyProperty.from_dict(d, source=str(path)) for d in doc]


@dataclass(frozen=True)
class VerifierConfig:
    max_depth: int = 30
    attack_restarts: int = 32
    attack_steps: int = 60
    split_heuristic: str = "widest"      # "widest" | "smallest_margin"
    stability_tolerance: float = 1e-9
    max_subproblems: int = 200_000
    node_attack_restarts: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if self.split_heuristic not in ("widest", "smallest_margin"):
            raise ValueError(f"unknown split heuristic {self.split_heuristic!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "VerifierConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown verifier config fields: {sorted(unknown)}")
        return cls(**doc)

    def with_overrides(self, **kwargs) -> "VerifierConfig":
        return replace(self, **kwargs)


@dataclass
class VerificationResult:
    verdict: str                      # "SAT" | "UNSAT" | "UNKNOWN"
    witness: np.ndarray | None
    stats: dict

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "witness": None if self.witness is None else self.witness.tolist(),
            "stats": self.stats,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "VerificationResult":
        w = doc.get("witness")
        return cls(doc["verdict"],
                   None if w is None else np.asarray(w, dtype=np.float64),
                   dict(doc.get("stats", {})))


# -- symbolic bound propagation ---------------------------------------------------


class BoundsState:
    """Per-neuron concrete intervals plus affine envelopes over the inputs.

    For every x in the box and every neuron, lower(x) <= value(x) <=
    upper(x); post_sym holds the envelopes of the layer feeding the final
    affine map (the last hidden activation, or the inputs themselves for a
    single-layer network).
    """

    def __init__(self, box):
        self.box = box
        self.pre_lb: list[np.ndarray] = []
        self.pre_ub: list[np.ndarray] = []
        self.post_sym = None          # (lo_c, lo_k, up_c, up_k)
        self.logit_lb = None
        self.logit_ub = None


def _concretize(lo_c, lo_k, up_c, up_k, x_lo, x_hi):
    lb = lo_k + np.maximum(lo_c, 0.0) @ x_lo + np.minimum(lo_c, 0.0) @ x_hi
    ub = up_k + np.maximum(up_c, 0.0) @ x_hi + np.minimum(up_c, 0.0) @ x_lo
    return lb, ub


def _affine_compose(W, b, lo_c, lo_k, up_c, up_k):
    Wp = np.maximum(W, 0.0)
    Wn = np.minimum(W, 0.0)
    new_lo_c = Wp @ lo_c + Wn @ up_c
    new_lo_k = Wp @ lo_k + Wn @ up_k + b
    new_up_c = Wp @ up_c + Wn @ lo_c
    new_up_k = Wp @ up_k + Wn @ lo_k + b
    return new_lo_c, new_lo_k, new_up_c, new_up_k


def propagate_bounds(net: PolicyNetwork, box,
                     stability_tolerance: float = 1e-9) -> BoundsState:
    """Push sound affine envelopes through the network over an input box."""
    box = np.asarray(box, dtype=np.float64)
    x_lo, x_hi = box[:, 0].copy(), box[:, 1].copy()
    state = BoundsState(box)
    n_in = net.n_inputs
    eye = np.eye(n_in)
    zero = np.zeros(n_in)
    lo_c, lo_k, up_c, up_k = eye, zero, eye, zero   # identity over the inputs
    tol = stability_tolerance

    for i, spec in enumerate(net.layer_specs):
        lo_c, lo_k, up_c, up_k = _affine_compose(net.weights[i], net.biases[i],
                                                 lo_c, lo_k, up_c, up_k)
        lb, ub = _concretize(lo_c, lo_k, up_c, up_k, x_lo, x_hi)
        state.pre_lb.append(lb)
        state.pre_ub.append(ub)
        if i == len(net.layer_specs) - 1:
            state.logit_lb, state.logit_ub = lb, ub
            break
        state.post_sym = None
        if spec.activation == "relu":
            inactive = ub <= tol
            active = ~inactive & (lb >= -tol)
            unstable = ~inactive & ~active
            slope_up = np.ones_like(lb)
            slope_lo = np.ones_like(lb)
            mu = np.zeros_like(lb)
            slope_up[inactive] = 0.0
            slope_lo[inactive] = 0.0
            if unstable.any():
                u = ub[unstable]
                l = lb[unstable]
                s = u / (u - l)
                slope_up[unstable] = s
                mu[unstable] = -l * s
                slope_lo[unstable] = (np.abs(l) <= np.abs(u)).astype(np.float64)
            lo_c = slope_lo[:, None] * lo_c
            lo_k = slope_lo * lo_k
            up_c = slope_up[:, None] * up_c
            up_k = slope_up * up_k + mu
        state.post_sym = (lo_c, lo_k, up_c, up_k)
    if state.post_sym is None:     # single affine layer: envelopes of the inputs
        state.post_sym = (eye, zero, eye, zero)
    return state


def logit_gap_lower_bounds(net: PolicyNetwork, state: BoundsState,
                           forbidden: int, return_coeffs: bool = False):
    """Sound lower bounds of z_j - z_forbidden over the box, per action j.

    Composes the difference row through the envelopes of the layer feeding
    the output, which is tighter than subtracting concretized logit bounds.
    """
    W = net.weights[-1]
    b = net.biases[-1]
    Wd = W - W[forbidden]
    bd = b - b[forbidden]
    lo_c, lo_k, up_c, up_k = state.post_sym
    gap_lo_c, gap_lo_k, _, _ = _affine_compose(Wd, bd, lo_c, lo_k, up_c, up_k)
    lows, _ = _concretize(gap_lo_c, gap_lo_k, gap_lo_c, gap_lo_k,
                          state.box[:, 0], state.box[:, 1])
    lows[forbidden] = -np.inf
    if return_coeffs:
        return lows, gap_lo_c
    return lows


# -- counterexample search ----------------------------------------------------------


def _margins_and_grad(net, X, forbidden):
    """Margin z_f - max_{j != f} z_j and its input gradient, batched."""
    logits, cache = net.forward_cached(X)
    masked = logits.copy()
    masked[:, forbidden] = -np.inf
    j_star = np.argmax(masked, axis=1)
    n = X.shape[0]
    idx = np.arange(n)
    margins = logits[:, forbidden] - masked[idx, j_star]
    grad_out = np.zeros_like(logits)
    grad_out[:, forbidden] = 1.0
    grad_out[idx, j_star] -= 1.0
    grad_x = backprop(net, cache, grad_out, tape=None)
    return logits, margins, grad_x


def _first_violation(net, X, forbidden):
    logits = net.forward_batch(X)
    hits = np.argmax(logits, axis=1) == forbidden
    if hits.any():
        return X[int(np.argmax(hits))].copy()
    return None


def _corner_probes(box, cap: int) -> np.ndarray:
    """The first `cap` corners of the active dims, in binary order."""
    lo, hi = box[:, 0], box[:, 1]
    active = np.nonzero(hi > lo)[0]
    corners = []
    for bits in itertools.product((0, 1), repeat=len(active)):
        x = lo.copy()
        for d, bit in zip(active, bits):
            if bit:
                x[d] = hi[d]
        corners.append(x)
        if len(corners) >= cap:
            break
    return np.array(corners) if corners else np.empty((0, box.shape[0]))


def search_counterexample(net: PolicyNetwork, prop: SafetyProperty,
                          config: VerifierConfig,
                          rng: np.random.Generator,
                          restarts: int | None = None) -> np.ndarray | None:
    """Projected gradient ascent on the margin plus corner/midpoint probes.

    Returns a point only if concrete greedy selection at it equals the
    forbidden action (ties resolved toward the lowest index as everywhere).
    Absence of a witness is not a verdict.
    """
    box = prop.box
    f = prop.forbidden_action
    lo, hi = box[:, 0], box[:, 1]
    widths = hi - lo
    n_restarts = config.attack_restarts if restarts is None else restarts

    starts = [((lo + hi) / 2.0)[None, :]]
    if n_restarts > 1:
        starts.append(lo + rng.random((n_restarts - 1, box.shape[0])) * widths)
    corners = _corner_probes(box, config.attack_restarts)
    if corners.size:
        starts.append(corners)
    X = np.vstack(starts)

    hit = _first_violation(net, X, f)
    if hit is not None:
        return hit
    step = np.maximum(widths, 1e-12) * 0.1
    for _ in range(config.attack_steps):
        _, margins, grad = _margins_and_grad(net, X, f)
        X = np.clip(X + step * np.sign(grad), lo, hi)
        hit = _first_violation(net, X, f)
        if hit is not None:
            return hit
    return None


def random_attack_audit(net: PolicyNetwork, prop: SafetyProperty,
                        n_samples: int = 100_000, restarts: int = 100,
                        steps: int = 60, seed: int = 0) -> np.ndarray | None:
    """Random sampling plus a gradient attack; used to audit UNSAT verdicts."""
    rng = np.random.Generator(np.random.PCG64(seed))
    lo, hi = prop.box[:, 0], prop.box[:, 1]
    f = prop.forbidden_action
    chunk = 20_000
    remaining = n_samples
    while remaining > 0:
        m = min(chunk, remaining)
        X = lo + rng.random((m, prop.box.shape[0])) * (hi - lo)
        hit = _first_violation(net, X, f)
        if hit is not None:
            return hit
        remaining -= m
    cfg = VerifierConfig(attack_restarts=restarts, attack_steps=steps)
    return search_counterexample(net, prop, cfg, rng, restarts=restarts)


# -- branch and bound ---------------------------------------------------------------


def _split_dimension(box, heuristic, lows, coeffs):
    widths = box[:, 1] - box[:, 0]
    if heuristic == "smallest_margin" and coeffs is not None:
        j_bind = int(np.argmin(lows))
        score = widths * np.abs(coeffs[j_bind])
        if score.max() > 0.0:
            return int(np.argmax(score))
    return int(np.argmax(widths))


def check_property(net: PolicyNetwork, prop: SafetyProperty,
                   config: VerifierConfig | None = None) -> VerificationResult:
    """Branch-and-bound decision of one property.

    Depth-first over sub-boxes; SAT short-circuits globally, UNSAT requires
    every sub-box pruned, and exhausting max_depth or max_subproblems
    yields UNKNOWN (never a wrong verdict).
    """
    config = config if config is not None else VerifierConfig()
    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    t_start = time.perf_counter()
    stack = [(prop.box, 0)]
    nodes = 0
    deepest = 0
    unresolved = False

    def finish(verdict, witness=None):
        return VerificationResult(verdict, witness, {
            "subproblems": nodes,
            "max_depth": deepest,
            "seconds": time.perf_counter() - t_start,
        })

    while stack:
        box, depth = stack.pop()
        nodes += 1
        deepest = max(deepest, depth)

        state = propagate_bounds(net, box, config.stability_tolerance)
        want_coeffs = config.split_heuristic == "smallest_margin"
        out = logit_gap_lower_bounds(net, state, prop.forbidden_action,
                                     return_coeffs=want_coeffs)
        lows, coeffs = out if want_coeffs else (out, None)
        if np.max(lows) > 0.0:
            continue    # some other action provably dominates everywhere

        sub = prop.with_box(box)
        budget = None if depth == 0 else config.node_attack_restarts
        witness = search_counterexample(net, sub, config, rng, restarts=budget)
        if witness is not None:
            if not prop.contains(witness):
                raise AssertionError("witness escaped the property box")
            if greedy_action(net.forward(witness)) != prop.forbidden_action:
                raise AssertionError("witness does not replay to the forbidden action")
            return finish("SAT", witness)

        if nodes >= config.max_subproblems:
            unresolved = True
            break
        if depth >= config.max_depth:
            unresolved = True
            continue

        dim = _split_dimension(box, config.split_heuristic, lows, coeffs)
        if box[dim, 1] - box[dim, 0] <= 0.0:
            unresolved = True      # point box that neither prunes nor violates
            continue
        mid = 0.5 * (box[dim, 0] + box[dim, 1])
        upper = box.copy()
        upper[dim, 0] = mid
        lower = box.copy()
        lower[dim, 1] = mid
        stack.append((upper, depth + 1))
        stack.append((lower, depth + 1))

    return finish("UNKNOWN" if unresolved else "UNSAT")


@dataclass
class VerificationSummary:
    results: dict
    safe: bool

    def to_dict(self) -> dict:
        return {"safe": self.safe,
                "results": {k: v.to_dict() for k, v in self.results.items()}}


def verify_all(net: PolicyNetwork, properties,
               config: VerifierConfig | None = None) -> VerificationSummary:
    """Check every property; safe only when all verdicts are UNSAT
    (UNKNOWN is conservatively unsafe)."""
    results = {}
    for prop in properties:
        results[prop.name] = check_property(net, prop, config)
    safe = all(r.verdict == "UNSAT" for r in results.values())
    return VerificationSummary(results, safe)


# -- brute-force oracle --------------------------------------------------------------


@dataclass
class GridVerdict:
    verdict: str       # "SAT" | "UNSAT_certified" | "INCONCLUSIVE"
    witness: np.ndarray | None
    max_margin: float
    lipschitz: float
    points: int


def network_lipschitz_bound(net: PolicyNetwork) -> float:
    """Product of per-layer max-row-sum norms; each logit is this Lipschitz
    in the input max-norm (ReLU is 1-Lipschitz)."""
    L = 1.0
    for w in net.weights:
        L *= float(np.abs(w).sum(axis=1).max())
    return L


def grid_certify(net: PolicyNetwork, prop: SafetyProperty, epsilon: float,
                 max_points: int = 2_000_000, chunk: int = 65_536) -> GridVerdict:
    """Dense-grid oracle over the property's non-degenerate dimensions.

    SAT on the first grid point whose greedy action is forbidden.  UNSAT is
    certified when the best grid margin stays below -L * eps * sqrt(k):
    between grid points the margin can rise at most 2L * (eps/2) = L * eps
    (grid spans each active dim with spacing <= eps), so that threshold --
    with the extra sqrt(k) slack -- leaves no room for a violation.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    box = prop.box
    f = prop.forbidden_action
    active = prop.active_dims
    axes = []
    total = 1
    for d in active:
        width = box[d, 1] - box[d, 0]
        n = int(np.ceil(width / epsilon)) + 1
        axes.append(np.linspace(box[d, 0], box[d, 1], n))
        total *= n
    if total > max_points:
        raise ValueError(
            f"grid of {total} points over {len(active)} active dims exceeds "
            f"the cap of {max_points}; raise max_points or coarsen epsilon")

    base = box[:, 0].copy()
    L = network_lipschitz_bound(net)
    if not axes:
        X = base[None, :]
        logits = net.forward_batch(X)
        if int(np.argmax(logits[0])) == f:
            return GridVerdict("SAT", base, 0.0, L, 1)
        masked = logits[0].copy()
        masked[f] = -np.inf
        margin = float(logits[0, f] - masked.max())
        verdict = "UNSAT_certified" if margin < 0.0 else "INCONCLUSIVE"
        return GridVerdict(verdict, None, margin, L, 1)

    mesh = np.meshgrid(*axes, indexing="ij")
    flat = [m.reshape(-1) for m in mesh]
    max_margin = -np.inf
    for start in range(0, total, chunk):
        end = min(start + chunk, total)
        X = np.tile(base, (end - start, 1))
        for col, d in enumerate(active):
            X[:, d] = flat[col][start:end]
        logits = net.forward_batch(X)
        hits = np.argmax(logits, axis=1) == f
        if hits.any():
            w = X[int(np.argmax(hits))].copy()
            return GridVerdict("SAT", w, float("nan"), L, total)
        masked = logits.copy()
        masked[:, f] = -np.inf
        margins = logits[:, f] - masked.max(axis=1)
        max_margin = max(max_margin, float(margins.max()))

    threshold = L * epsilon * np.sqrt(len(active))
    verdict = "UNSAT_certified" if max_margin < -threshold else "INCONCLUSIVE"
    return GridVerdict(verdict, None, max_margin, L, total)


# -- adversarial sensitivity demo -----------------------------------------------------


def find_contrast_pair(net: PolicyNetwork, prop: SafetyProperty, witness,
                       max_delta: float = 0.1):
    """A single-cell perturbation of the witness with a safe outcome.

    Returns (perturbed input, cell index, delta) or None.  The perturbed
    point stays in [0, 1] and differs from the witness in one cell by at
    most max_delta; its greedy action is no longer the forbidden one.
    """
    witness = np.asarray(witness, dtype=np.float64)
    f = prop.forbidden_action
    deltas = [s * m * max_delta for m in (1.0, 0.8, 0.6, 0.4, 0.2)
              for s in (1.0, -1.0)]
    candidates = [witness]
    # also probe from a point pulled toward the safe side of the margin
    logits = net.forward(witness)
    masked = logits.copy()
    masked[f] = -np.inf
    lo, hi = prop.box[:, 0], prop.box[:, 1]
    center = np.clip((lo + hi) / 2.0, 0.0, 1.0)
    for frac in (0.5, 0.75, 0.9):
        mix = witness + frac * (center - witness)
        if greedy_action(net.forward(mix)) == f:
            candidates.append(mix)
    for base in candidates:
        for cell in range(OBS_SIZE):
            for delta in deltas:
                cand = base.copy()
                cand[cell] = np.clip(cand[cell] + delta, 0.0, 1.0)
                if abs(cand[cell] - base[cell]) < 1e-12:
                    continue
                if greedy_action(net.forward(cand)) != f:
                    if not np.allclose(base, witness):
                        # re-anchor: base itself must still violate
                        if greedy_action(net.forward(base)) != f:
                            continue
                    return cand, cell, float(cand[cell] - base[cell]), base
    return None


class BranchAndBoundVerifier(BaseEstimator):
    """Estimator-style wrapper so verifier settings travel like model params."""

    def __init__(self, max_depth=30, attack_restarts=32, attack_steps=60,
                 split_heuristic="widest", stability_tolerance=1e-9,
                 max_subproblems=200_000, node_attack_restarts=4, rng_seed=0):
        self.max_depth = max_depth
        self.attack_restarts = attack_restarts
        self.attack_steps = attack_steps
        self.split_heuristic = split_heuristic
        self.stability_tolerance = stability_tolerance
        self.max_subproblems = max_subproblems
        self.node_attack_restarts = node_attack_restarts
        self.rng_seed = rng_seed

    def _config(self) -> VerifierConfig:
        return VerifierConfig(
            max_depth=self.max_depth, attack_restarts=self.attack_restarts,
            attack_steps=self.attack_steps,
            split_heuristic=self.split_heuristic,
            stability_tolerance=self.stability_tolerance,
            max_subproblems=self.max_subproblems,
            node_attack_restarts=self.node_attack_restarts,
            rng_seed=self.rng_seed)

    def verify(self, net: PolicyNetwork, prop: SafetyProperty) -> VerificationResult:
        return check_property(net, prop, self._config())

    def verify_all(self, net: PolicyNetwork, properties) -> VerificationSummary:
        return verify_all(net, properties, self._config())
