"""Query-only attacks under a strict query ledger.

Three attacks share the same threat model: the attacker sees class scores
for any input it submits (one ledger count per evaluated input, batched
or not) and wins when a submitted input inside the perturbation ball is
misclassified. Every point actually sent to the model is first projected
into the eps-ball around the clean sample intersected with the pixel
range, so feasibility holds for probes as well as iterates.

* NES: Monte-Carlo smoothed-gradient estimate driving sign updates, with
  antithetic sampling on by default.
* Bandits: a low-resolution prior over the gradient, updated by a
  two-point estimate and upsampled (nearest-neighbor) to the image.
* Parsimonious: greedy combinatorial search over the eps-ball vertices,
  flipping block signs and refining the block grid between rounds.

Batching groups forward evaluations only; the accept/reject decisions
follow the sequential order of candidates, and chunk composition is a
deterministic function of the configuration, so reruns are identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .nn import Model, log_softmax


@dataclass
class QueryEvent:
    index: int  # 1-based query count after this evaluation
    loss: float
    success: bool


@dataclass
class QueryLedger:
    """Strict accounting: one count per model evaluation, hard cap.

    ``violations`` counts queried points that broke the perturbation ball
    or the pixel range; attacks keep it at zero by projecting every probe
    before submitting it, and the counter proves that they did.
    """

    max_queries: int = 15000
    count: int = 0
    events: list[QueryEvent] = field(default_factory=list)
    violations: int = 0

    @property
    def remaining(self) -> int:
        return self.max_queries - self.count

    def record(self, losses, successes) -> None:
        if len(losses) > self.remaining:
            raise InputError("query budget exceeded")
        for loss, success in zip(losses, successes):
            self.count += 1
            self.events.append(QueryEvent(self.count, float(loss), bool(success)))

    def first_success(self) -> int | None:
        for ev in self.events:
            if ev.success:
                return ev.index
        return None


class LossOracle:
    """Score-based query interface to a frozen model.

    Each call evaluates a batch of inputs, charges one query per row, and
    returns (per-sample cross-entropy against the true label, per-sample
    misclassification flags). The attack code never sees anything else.
    When a feasibility box (x0, eps, lo, hi) is given, every submitted
    point is audited against it and breaches are tallied on the ledger.
    """

    def __init__(self, model: Model, true_label: int, ledger: QueryLedger,
                 box=None):
        self.model = model
        self.true_label = int(true_label)
        self.ledger = ledger
        self.box = box

    def _audit(self, X: np.ndarray) -> None:
        x0, eps, lo, hi = self.box
        flat = X.reshape(len(X), -1)
        base = np.asarray(x0).reshape(-1)
        bad = (np.max(np.abs(flat - base), axis=1) > eps + 1e-12) \
            | (flat.min(axis=1) < lo - 1e-12) | (flat.max(axis=1) > hi + 1e-12)
        self.ledger.violations += int(bad.sum())

    def __call__(self, X: np.ndarray):
        X = np.asarray(X)
        if self.box is not None:
            rows = X[None] if X.ndim == np.asarray(self.box[0]).ndim else X
            self._audit(rows)
        logits = self.model.forward(X)
        if logits.ndim == 1:
            logits = logits[None]
        ls = log_softmax(logits)
        losses = -ls[:, self.true_label]
        successes = np.argmax(logits, axis=1) != self.true_label
        self.ledger.record(losses, successes)
        return losses, successes


@dataclass
class AttackOutcome:
    """Result of one per-sample black-box attack."""

    success: bool
    first_success_query: int | None
    queries_used: int
    x_adv: np.ndarray
    ledger: QueryLedger


@dataclass
class NesConfig:
    sigma: float = 0.1
    n_samples: int = 50
    antithetic: bool = True
    batch: int = 1024
    step_size: float = 0.01

    def __post_init__(self):
        if self.sigma <= 0:
            raise InputError("sigma must be positive")
        if self.n_samples < 1:
            raise InputError("n_samples must be >= 1")
        if self.antithetic and self.n_samples % 2:
            raise InputError("antithetic sampling needs an even n_samples")
        if self.batch < 1 or self.step_size <= 0:
            raise InputError("batch and step_size must be positive")


@dataclass
class BanditsConfig:
    sigma: float = 0.1
    online_lr: float = 0.1
    exploration: float = 0.1
    prior_size: int = 16
    grad_iters: int = 1
    image_step: float = 0.01

    def __post_init__(self):
        for name in ("sigma", "online_lr", "exploration", "image_step"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")
        if self.prior_size < 1 or self.grad_iters < 1:
            raise InputError("prior_size and grad_iters must be >= 1")


@dataclass
class ParsimoniousConfig:
    epsilon: float = 8.0 / 256.0
    local_search_iters: int = 1
    init_block_size: int = 4
    batch: int = 64
    hierarchical: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise InputError("epsilon must be positive")
        if self.init_block_size < 1 or self.batch < 1 or self.local_search_iters < 1:
            raise InputError("block size, batch and iters must be >= 1")
        if self.hierarchical:
            raise InputError("hierarchical evaluation is not supported")


@dataclass
class NesEstimate:
    grad: np.ndarray
    n_evaluated: int
    complete: bool


def nes_gradient(loss_fn, x: np.ndarray, y: int, cfg: NesConfig,
                 ledger: QueryLedger, rng: np.random.Generator) -> NesEstimate:
    """Smoothed-gradient estimate (1/(sigma*N)) sum_i delta_i l(x + sigma*delta_i).

    ``loss_fn(X) -> losses`` is charged one query per row by its owner;
    this function only sizes its probe set to the ledger's remaining
    budget. With antithetic sampling the probes come in (+delta, -delta)
    pairs, so a constant loss yields an exactly zero estimate. If the
    budget cannot cover all n_samples probes the estimate is computed
    from the evaluated prefix and flagged incomplete.
    """
    x = np.asarray(x, dtype=np.float64)
    n = cfg.n_samples
    allowed = min(n, max(ledger.remaining, 0))
    if cfg.antithetic:
        allowed -= allowed % 2
    if allowed == 0:
        return NesEstimate(grad=np.zeros_like(x), n_evaluated=0, complete=False)
    if cfg.antithetic:
        half = allowed // 2
        base = rng.standard_normal((half,) + x.shape)
        deltas = np.empty((allowed,) + x.shape)
        deltas[0::2] = base
        deltas[1::2] = -base
    else:
        deltas = rng.standard_normal((allowed,) + x.shape)
    losses = np.empty(allowed)
    for lo in range(0, allowed, cfg.batch):
        chunk = deltas[lo:lo + cfg.batch]
        losses[lo:lo + len(chunk)] = loss_fn(x[None] + cfg.sigma * chunk)
    if cfg.antithetic:
        # pair-differenced form: delta * (l(x+sd) - l(x-sd)) cancels a
        # constant loss exactly, term by term
        diffs = losses[0::2] - losses[1::2]
        acc = np.tensordot(diffs, deltas[0::2], axes=(0, 0))
    else:
        acc = np.tensordot(losses, deltas, axes=(0, 0))
    grad = acc / (cfg.sigma * allowed)
    return NesEstimate(grad=grad, n_evaluated=allowed, complete=allowed == n)


def _clip_ball(X, x0, epsilon, pixel_range):
    lo, hi = pixel_range
    return np.clip(np.clip(X, x0 - epsilon, x0 + epsilon), lo, hi)


def _first_success(ledger: QueryLedger, count_before: int):
    """First successful event after a given count, if any."""
    for ev in ledger.events[count_before:]:
        if ev.success:
            return ev.index
    return None


def nes_attack(model: Model, x0, y: int, cfg: NesConfig, epsilon: float,
               ledger: QueryLedger, seed: int = 0,
               pixel_range: tuple[float, float] = (0.0, 1.0)) -> AttackOutcome:
    """Sign updates along the NES estimate until misclassification or budget.

    The caller guarantees x0 is correctly classified. Probe points are
    projected into the feasible box before being queried, so any probe
    that happens to flip the prediction counts as a success in its own
    right. One extra query per step checks the current iterate.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    oracle = LossOracle(model, y, ledger,
                        box=(x0, epsilon, *pixel_range))
    rng = np.random.default_rng(seed)
    found: dict[str, np.ndarray] = {}

    def probe_loss(X):
        probes = _clip_ball(X, x0, epsilon, pixel_range)
        losses, succ = oracle(probes)
        if "x" not in found and np.any(succ):
            found["x"] = probes[int(np.argmax(succ))]
        return losses

    x = x0.copy()
    while ledger.remaining >= cfg.n_samples + 1:
        before = ledger.count
        est = nes_gradient(probe_loss, x, y, cfg, ledger, rng)
        hit = _first_success(ledger, before)
        if hit is not None:
            return AttackOutcome(True, hit, ledger.count, found["x"], ledger)
        x = _clip_ball(x + cfg.step_size * np.sign(est.grad), x0, epsilon,
                       pixel_range)
        _, succ = oracle(x[None])
        if succ[0]:
            return AttackOutcome(True, ledger.count, ledger.count, x, ledger)
    return AttackOutcome(False, None, ledger.count, x, ledger)


def _upsample_nearest(prior: np.ndarray, side: int) -> np.ndarray:
    ps = prior.shape[-1]
    idx = (np.arange(side) * ps) // side
    return prior[:, idx][:, :, idx]


def bandits_attack(model: Model, x0, y: int, cfg: BanditsConfig, epsilon: float,
                   ledger: QueryLedger, seed: int = 0,
                   pixel_range: tuple[float, float] = (0.0, 1.0)) -> AttackOutcome:
    """Gradient estimation with a low-resolution prior.

    The prior (side = prior_size, nearest-neighbor upsampled to the image)
    is refined each step by a two-point estimate along a random prior
    direction, exploiting correlations between nearby pixels and between
    steps; the iterate moves by image_step along the sign of the upsampled
    prior. With prior_size equal to the image side this degenerates to
    tile-free two-point estimation on full-resolution directions.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 3:
        raise InputError("bandits attack expects (C, H, W) images")
    C, H, W = x0.shape
    if H != W:
        raise InputError("bandits attack expects square images")
    ps = min(cfg.prior_size, H)
    oracle = LossOracle(model, y, ledger,
                        box=(x0, epsilon, *pixel_range))
    rng = np.random.default_rng(seed)
    prior = np.zeros((C, ps, ps))

    x = x0.copy()
    while ledger.remaining >= 2 * cfg.grad_iters + 1:
        before = ledger.count
        found = None
        for _ in range(cfg.grad_iters):
            u = rng.standard_normal((C, ps, ps))
            d1 = _upsample_nearest(prior + cfg.exploration * u, H)
            d2 = _upsample_nearest(prior - cfg.exploration * u, H)
            for d in (d1, d2):
                nrm = np.linalg.norm(d)
                if nrm > 0:
                    d /= nrm
            probes = np.stack([
                _clip_ball(x + cfg.sigma * d1, x0, epsilon, pixel_range),
                _clip_ball(x + cfg.sigma * d2, x0, epsilon, pixel_range),
            ])
            losses, succ = oracle(probes)
            if found is None and np.any(succ):
                found = probes[int(np.argmax(succ))]
            delta = (losses[0] - losses[1]) / (cfg.exploration * cfg.sigma) * u
            prior += cfg.online_lr * delta
        hit = _first_success(ledger, before)
        if hit is not None:
            return AttackOutcome(True, hit, ledger.count, found, ledger)
        x = _clip_ball(x + cfg.image_step * np.sign(_upsample_nearest(prior, H)),
                       x0, epsilon, pixel_range)
        _, succ = oracle(x[None])
        if succ[0]:
            return AttackOutcome(True, ledger.count, ledger.count, x, ledger)
    return AttackOutcome(False, None, ledger.count, x, ledger)


def _block_grid(H: int, W: int, size: int) -> list[tuple[int, int, int, int]]:
    """Row-major tiling into size x size blocks; remainders get edge blocks."""
    rows = list(range(0, H, size))
    cols = list(range(0, W, size))
    return [(r, min(r + size, H), c, min(c + size, W)) for r in rows for c in cols]


def _split_signs(signs: np.ndarray, old, new) -> np.ndarray:
    """Children inherit the sign of the parent block containing their corner."""
    out = np.empty(len(new), dtype=np.float64)
    for i, (r0, _, c0, _) in enumerate(new):
        for j, (R0, R1, C0, C1) in enumerate(old):
            if R0 <= r0 < R1 and C0 <= c0 < C1:
                out[i] = signs[j]
                break
    return out


def parsimonious_attack(model: Model, x0, y: int, cfg: ParsimoniousConfig,
                        ledger: QueryLedger,
                        pixel_range: tuple[float, float] = (0.0, 1.0)) -> AttackOutcome:
    """Greedy local search over the eps-ball vertices.

    Every candidate sets each pixel to x0 - eps or x0 + eps (clipped to
    the pixel range), one shared sign per block across channels. Blocks
    start at -eps; sweeps evaluate single-block flips in deterministic
    row-major order, batched, and accept those that strictly increase the
    loss (re-checking the combined assignment when several flips from one
    batch are accepted; if the combination does not improve, only the best
    single flip is kept). After ``local_search_iters`` sweeps the blocks
    split in half (4 -> 2 -> 1); at the finest level sweeps continue until
    no flip improves. Stops at the first misclassified query or when the
    budget runs out.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 3:
        raise InputError("parsimonious attack expects (C, H, W) images")
    _, H, W = x0.shape
    oracle = LossOracle(model, y, ledger,
                        box=(x0, cfg.epsilon, *pixel_range))

    def assemble(signs, blocks):
        pert = np.empty((H, W))
        for s, (r0, r1, c0, c1) in zip(signs, blocks):
            pert[r0:r1, c0:c1] = s
        return _clip_ball(x0 + cfg.epsilon * pert[None], x0, cfg.epsilon,
                          pixel_range)

    def outcome(success, x_adv):
        return AttackOutcome(success, ledger.first_success(), ledger.count,
                             x_adv, ledger)

    size = max(1, min(cfg.init_block_size, H, W))
    blocks = _block_grid(H, W, size)
    signs = np.full(len(blocks), -1.0)

    if ledger.remaining < 1:
        return outcome(False, x0)
    current = assemble(signs, blocks)
    losses, succ = oracle(current[None])
    if succ[0]:
        return outcome(True, current)
    best_loss = float(losses[0])

    while True:
        final_level = size == 1
        sweeps = 0
        while True:
            improved = False
            i = 0
            while i < len(blocks):
                chunk = list(range(i, min(i + cfg.batch, len(blocks))))
                i += len(chunk)
                if ledger.remaining < len(chunk):
                    chunk = chunk[:ledger.remaining]
                if not chunk:
                    return outcome(False, current)
                cands = []
                for b in chunk:
                    s = signs.copy()
                    s[b] = -s[b]
                    cands.append(assemble(s, blocks))
                losses, succs = oracle(np.stack(cands))
                if np.any(succs):
                    k = int(np.argmax(succs))
                    return outcome(True, cands[k])
                better = [(b, float(l)) for b, l in zip(chunk, losses)
                          if l > best_loss]
                if not better:
                    continue
                improved = True
                if len(better) == 1:
                    b, l = better[0]
                    signs[b] = -signs[b]
                    best_loss = l
                    current = cands[chunk.index(b)]
                    continue
                trial = signs.copy()
                for b, _ in better:
                    trial[b] = -trial[b]
                if ledger.remaining < 1:
                    # Cannot verify the combination; keep the best single flip.
                    b, l = max(better, key=lambda t: t[1])
                    signs[b] = -signs[b]
                    best_loss = l
                    current = cands[chunk.index(b)]
                    return outcome(False, current)
                combined = assemble(trial, blocks)
                closs, csucc = oracle(combined[None])
                if csucc[0]:
                    return outcome(True, combined)
                if closs[0] > best_loss:
                    signs = trial
                    best_loss = float(closs[0])
                    current = combined
                else:
                    b, l = max(better, key=lambda t: t[1])
                    signs[b] = -signs[b]
                    best_loss = l
                    current = cands[chunk.index(b)]
            sweeps += 1
            if final_level:
                if not improved:
                    return outcome(False, current)
            elif sweeps >= cfg.local_search_iters:
                break
        new_size = max(1, size // 2)
        new_blocks = _block_grid(H, W, new_size)
        signs = _split_signs(signs, blocks, new_blocks)
        blocks, size = new_blocks, new_size


def csr_curve(outcomes, max_queries: int | None = None):
    """Cumulative success rate as a step function of the query budget.

    Accepts attack outcomes or ledgers (anything exposing a first-success
    index). Returns (queries, fraction) breakpoint arrays: a monotone
    nondecreasing step function on [0, max_queries], starting at 0.
    """
    items = list(outcomes)
    if not items:
        raise InputError("no outcomes")
    firsts = []
    cap = 0
    for it in items:
        if isinstance(it, QueryLedger):
            firsts.append(it.first_success())
            cap = max(cap, it.max_queries)
        elif isinstance(it, AttackOutcome):
            firsts.append(it.first_success_query)
            cap = max(cap, it.ledger.max_queries)
        else:
            firsts.append(it)
    if max_queries is not None:
        cap = max_queries
    if cap == 0:
        raise InputError("max_queries unknown; pass it explicitly")
    n = len(firsts)
    hits = sorted(q for q in firsts if q is not None)
    queries = [0]
    fractions = [0.0]
    done = 0
    for q in hits:
        done += 1
        if q == queries[-1]:
            fractions[-1] = done / n
        else:
            queries.append(q)
            fractions.append(done / n)
    if queries[-1] != cap:
        queries.append(cap)
        fractions.append(fractions[-1])
    return np.asarray(queries), np.asarray(fractions)
