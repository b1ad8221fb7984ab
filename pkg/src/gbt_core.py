"""
Plaintext gradient-boosting mathematics

Losses and their derivatives, candidate thresholds, the split score and leaf
weight, the CART structure, depth-wise tree growth over pluggable statistics,
and a full plaintext trainer used as the reference for the federated path.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from src.config import (
    DEFAULT_ETA, DEFAULT_FEATURE_SUBSAMPLE, DEFAULT_GAMMA, DEFAULT_LAMBDA,
    DEFAULT_MAX_CANDIDATES, DEFAULT_MAX_DEPTH, DEFAULT_ROUNDS,
)
from src.errors import AggregationConsistencyError, ConfigurationError

logger = logging.getLogger(__name__)

MODEL_SCHEMA_VERSION = 1
ADDITIVITY_TOLERANCE = 2.0 ** -10


class LossKind(str, Enum):
    LOGISTIC = "logistic"
    SOFTMAX = "softmax"


@dataclass
class Instance:
    features: Dict[int, float]
    label: Union[float, int]

    def dense(self, num_features: int) -> np.ndarray:
        row = np.zeros(num_features, dtype=np.float64)
        for idx, value in self.features.items():
            row[idx] = value
        return row


@dataclass
class GradientPair:
    g: Union[float, np.ndarray]
    h: Union[float, np.ndarray]


@dataclass(frozen=True, order=True)
class SplitCandidate:
    feature: int
    threshold: float


@dataclass
class BoostParams:
    eta: float = DEFAULT_ETA
    gamma: float = DEFAULT_GAMMA
    lam: float = DEFAULT_LAMBDA
    max_depth: int = DEFAULT_MAX_DEPTH
    rounds: int = DEFAULT_ROUNDS
    feature_subsample: int = DEFAULT_FEATURE_SUBSAMPLE
    max_candidates: int = DEFAULT_MAX_CANDIDATES
    min_node_instances: int = 1
    loss: LossKind = LossKind.LOGISTIC
    num_classes: int = 2
    base_score: float = 0.0

    def __post_init__(self):
        self.loss = parse_loss(self.loss)

    def validate(self) -> "BoostParams":
        if not 0.0 < self.eta <= 1.0:
            raise ConfigurationError("eta must be in (0, 1]")
        if self.lam < 0 or self.gamma < 0:
            raise ConfigurationError("lam and gamma must be >= 0")
        if self.max_depth < 1:
            raise ConfigurationError("max_depth must be >= 1")
        if self.rounds < 0 or self.feature_subsample < 1 or self.max_candidates < 1:
            raise ConfigurationError("rounds >= 0, feature_subsample >= 1, max_candidates >= 1")
        if self.min_node_instances < 1:
            raise ConfigurationError("min_node_instances must be >= 1")
        if self.loss is LossKind.SOFTMAX and self.num_classes < 2:
            raise ConfigurationError("softmax needs at least 2 classes")
        return self

    @property
    def trees_per_round(self) -> int:
        return self.num_classes if self.loss is LossKind.SOFTMAX else 1


def parse_loss(kind) -> LossKind:
    try:
        return LossKind(kind)
    except ValueError as e:
        raise ConfigurationError(f"unknown loss kind {kind!r}") from e


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    shifted = np.exp(z - z.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def compute_gradients(kind, predictions: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    First and second derivatives per instance

    logistic: predictions (n,), labels in {0, 1}
    softmax: predictions (n, C), labels class indices; returns (n, C) arrays
    """
    kind = parse_loss(kind)
    if kind is LossKind.LOGISTIC:
        p = sigmoid(predictions)
        y = np.asarray(labels, dtype=np.float64)
        return p - y, p * (1.0 - p)
    probs = softmax(predictions)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(probs)), np.asarray(labels, dtype=np.int64)] = 1.0
    return probs - onehot, probs * (1.0 - probs)


def loss_gradients(kind, prediction_state, label) -> GradientPair:
    kind = parse_loss(kind)
    if kind is LossKind.LOGISTIC:
        g, h = compute_gradients(kind, np.array([prediction_state]), np.array([label]))
        return GradientPair(float(g[0]), float(h[0]))
    g, h = compute_gradients(kind, np.atleast_2d(prediction_state), np.array([label]))
    return GradientPair(g[0], h[0])


def loss_value(kind, predictions: np.ndarray, labels: np.ndarray) -> float:
    """Mean loss over instances"""
    kind = parse_loss(kind)
    if len(labels) == 0:
        return 0.0
    if kind is LossKind.LOGISTIC:
        z = np.asarray(predictions, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
        # log(1 + e^z) - y z, computed stably
        return float(np.mean(np.logaddexp(0.0, z) - y * z))
    z = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    m = z.max(axis=1)
    log_norm = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    picked = z[np.arange(len(z)), np.asarray(labels, dtype=np.int64)]
    return float(np.mean(log_norm - picked))


# ---------------------------------------------------------------------------
# Split scoring
# ---------------------------------------------------------------------------

def split_score(G_L: float, H_L: float, G_R: float, H_R: float, G: float, H: float,
                lam: float, tolerance: float = ADDITIVITY_TOLERANCE) -> float:
    if H_L + lam <= 0 or H_R + lam <= 0 or H + lam <= 0:
        raise AggregationConsistencyError("hessian sum plus lambda must be positive")
    if abs(G - G_L - G_R) > tolerance or abs(H - H_L - H_R) > tolerance:
        raise AggregationConsistencyError(
            f"child sums do not add up: G={G} vs {G_L}+{G_R}, H={H} vs {H_L}+{H_R}"
        )
    score = G_L * G_L / (H_L + lam) + G_R * G_R / (H_R + lam) - G * G / (H + lam)
    if not np.isfinite(score):
        raise AggregationConsistencyError("non-finite split score")
    return float(score)


def leaf_weight(G: float, H: float, lam: float) -> float:
    if H + lam <= 0:
        raise AggregationConsistencyError("hessian sum plus lambda must be positive")
    return float(-G / (H + lam))


def enumerate_candidates(values, feature: int, max_candidates: int) -> List[SplitCandidate]:
    """Midpoints between consecutive distinct values, thinned to at most m by quantile"""
    distinct = np.unique(np.asarray(values, dtype=np.float64))
    if len(distinct) < 2:
        return []
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    if len(mids) > max_candidates:
        if max_candidates == 1:
            picks = np.array([len(mids) // 2])
        else:
            picks = np.round(np.linspace(0, len(mids) - 1, max_candidates)).astype(np.int64)
        mids = mids[np.unique(picks)]
    return [SplitCandidate(int(feature), float(a)) for a in mids]


def build_candidate_table(X: np.ndarray, max_candidates: int) -> Dict[int, np.ndarray]:
    """Public per-feature threshold lists computed once over the training features"""
    table = {}
    for f in range(X.shape[1]):
        cands = enumerate_candidates(X[:, f], f, max_candidates)
        if cands:
            table[f] = np.array([c.threshold for c in cands], dtype=np.float64)
    return table


def candidates_for(candidate_table: Mapping[int, np.ndarray], features: Sequence[int]) -> List[SplitCandidate]:
    """Candidate list for a feature subset, ordered by (feature, threshold)"""
    return [
        SplitCandidate(int(f), float(a))
        for f in sorted(int(f) for f in features) if f in candidate_table
        for a in candidate_table[f]
    ]


def sample_features(num_features: int, subsample: int, seed: int, round_index: int,
                    class_index: int = 0) -> np.ndarray:
    """Per-tree feature subset; same stream for every arm using the same seed"""
    rng = np.random.default_rng([seed, 0x5EA7, round_index, class_index])
    size = min(subsample, num_features)
    return np.sort(rng.choice(num_features, size=size, replace=False))


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------

@dataclass
class CartNode:
    node_id: int
    depth: int
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional[int] = None
    right: Optional[int] = None
    weight: Optional[float] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class Cart:
    nodes: List[CartNode] = field(default_factory=list)
    class_index: int = 0
    round_index: int = 0

    @property
    def root(self) -> CartNode:
        return self.nodes[0]

    def depth(self) -> int:
        return max((n.depth for n in self.nodes), default=0)

    def internal_nodes(self) -> List[CartNode]:
        return [n for n in self.nodes if not n.is_leaf]

    def leaves(self) -> List[CartNode]:
        return [n for n in self.nodes if n.is_leaf]

    def structure(self) -> Tuple:
        """Topology and split choices, for comparing trees"""
        return tuple(
            (n.node_id, n.feature, n.threshold, n.left, n.right) for n in self.nodes
        )

    def validate(self, max_depth: Optional[int] = None) -> None:
        for n in self.nodes:
            if (n.left is None) != (n.right is None):
                raise AggregationConsistencyError(f"node {n.node_id} has one child")
            if n.is_leaf and n.weight is None:
                raise AggregationConsistencyError(f"leaf {n.node_id} has no weight")
        if max_depth is not None and self.depth() > max_depth:
            raise AggregationConsistencyError("tree deeper than max_depth")

    def leaf_index_batch(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id per row; x < threshold goes left"""
        X = np.atleast_2d(X)
        at = np.zeros(len(X), dtype=np.int64)
        for node in self.nodes:
            if node.is_leaf:
                continue
            here = at == node.node_id
            go_left = X[:, node.feature] < node.threshold
            at[here & go_left] = node.left
            at[here & ~go_left] = node.right
        return at

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        """Raw leaf weights (unscaled by eta) per row"""
        weights = np.array([n.weight if n.is_leaf else 0.0 for n in self.nodes], dtype=np.float64)
        return weights[self.leaf_index_batch(X)]

    def to_dict(self) -> dict:
        return {
            "class_index": self.class_index,
            "round_index": self.round_index,
            "nodes": [asdict(n) for n in self.nodes],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Cart":
        return cls([CartNode(**n) for n in data["nodes"]], data.get("class_index", 0),
                   data.get("round_index", 0))


def predict(trees: Sequence[Cart], instance, eta: float = DEFAULT_ETA, base_score: float = 0.0,
            num_classes: int = 1, num_features: Optional[int] = None):
    """
    Sum of eta-scaled leaf weights over trees.

    Returns a float when ``num_classes`` is 1, otherwise per-class scores.
    """
    if isinstance(instance, Instance):
        width = num_features or (max(instance.features, default=-1) + 1)
        for tree in trees:
            width = max(width, max((n.feature + 1 for n in tree.internal_nodes()), default=0))
        row = instance.dense(width)
    else:
        row = np.asarray(instance, dtype=np.float64)
    scores = np.full(num_classes, base_score, dtype=np.float64)
    for tree in trees:
        scores[tree.class_index] += eta * tree.predict_batch(row[None, :])[0]
    return float(scores[0]) if num_classes == 1 else scores


# ---------------------------------------------------------------------------
# Depth-wise growth over pluggable statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NodeStats:
    G: float
    H: float
    N: int


@dataclass(frozen=True)
class SplitDecision:
    candidate: SplitCandidate
    score: float
    left: NodeStats
    right: NodeStats


class StatsProvider(Protocol):
    """Where the per-node gradient statistics come from"""

    def node_totals(self, node_id: int) -> NodeStats: ...

    def left_sums(self, node_id: int, candidates: Sequence[SplitCandidate]
                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]: ...

    def apply_split(self, node_id: int, candidate: SplitCandidate, left_id: int, right_id: int) -> None: ...


def choose_split(node: NodeStats, candidates: Sequence[SplitCandidate], G_L: np.ndarray,
                 H_L: np.ndarray, N_L: np.ndarray, params: BoostParams) -> Optional[SplitDecision]:
    """
    Best admissible candidate by score, then the gamma gate (score / 2 > gamma).

    Candidates are scanned in (feature, threshold) order and only a strictly
    better score replaces the incumbent, so ties go to the lowest feature id
    and then the lowest threshold.
    """
    order = sorted(range(len(candidates)), key=lambda i: candidates[i])
    best: Optional[SplitDecision] = None
    for i in order:
        n_left = int(N_L[i])
        n_right = node.N - n_left
        if n_left < params.min_node_instances or n_right < params.min_node_instances:
            continue
        gl, hl = float(G_L[i]), float(H_L[i])
        gr, hr = node.G - gl, node.H - hl
        score = split_score(gl, hl, gr, hr, node.G, node.H, params.lam)
        if best is None or score > best.score:
            best = SplitDecision(candidates[i], score, NodeStats(gl, hl, n_left), NodeStats(gr, hr, n_right))
    if best is None or not best.score / 2.0 > params.gamma:
        return None
    return best


class TreeGrower:
    """Greedy depth-wise CART growth shared by the plaintext and federated trainers"""

    def __init__(self, params: BoostParams, candidate_table: Mapping[int, np.ndarray],
                 features: Sequence[int], class_index: int = 0, round_index: int = 0):
        self.params = params
        self.class_index = class_index
        self.round_index = round_index
        self.candidates = candidates_for(candidate_table, features)

    def grow(self, provider: StatsProvider) -> Cart:
        params = self.params
        tree = Cart(class_index=self.class_index, round_index=self.round_index)
        tree.nodes.append(CartNode(0, 0))
        frontier: List[Tuple[int, Optional[NodeStats]]] = [(0, None)]
        for depth in range(params.max_depth + 1):
            next_frontier = []
            for node_id, known in frontier:
                node = tree.nodes[node_id]
                if depth == params.max_depth:
                    stats = known if known is not None else provider.node_totals(node_id)
                    node.weight = leaf_weight(stats.G, stats.H, params.lam)
                    continue
                stats = provider.node_totals(node_id)
                decision = None
                if stats.N >= 2 * params.min_node_instances and self.candidates:
                    G_L, H_L, N_L = provider.left_sums(node_id, self.candidates)
                    decision = choose_split(stats, self.candidates, G_L, H_L, N_L, params)
                if decision is None:
                    node.weight = leaf_weight(stats.G, stats.H, params.lam)
                    continue
                left_id, right_id = len(tree.nodes), len(tree.nodes) + 1
                node.feature = decision.candidate.feature
                node.threshold = decision.candidate.threshold
                node.left, node.right = left_id, right_id
                tree.nodes.append(CartNode(left_id, depth + 1))
                tree.nodes.append(CartNode(right_id, depth + 1))
                provider.apply_split(node_id, decision.candidate, left_id, right_id)
                next_frontier.append((left_id, decision.left))
                next_frontier.append((right_id, decision.right))
            frontier = next_frontier
        tree.validate(params.max_depth)
        return tree


def left_sums_for(X: np.ndarray, g: np.ndarray, h: np.ndarray,
                  candidates: Sequence[SplitCandidate]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-candidate sums over rows with x < threshold (works on floats or scaled ints)"""
    G_L = np.zeros(len(candidates), dtype=g.dtype)
    H_L = np.zeros(len(candidates), dtype=h.dtype)
    N_L = np.zeros(len(candidates), dtype=np.int64)
    by_feature: Dict[int, List[int]] = {}
    for i, c in enumerate(candidates):
        by_feature.setdefault(c.feature, []).append(i)
    for f, positions in by_feature.items():
        thresholds = np.array([candidates[i].threshold for i in positions])
        left = (X[:, f][:, None] < thresholds[None, :])
        G_L[positions] = g @ left.astype(g.dtype)
        H_L[positions] = h @ left.astype(h.dtype)
        N_L[positions] = left.sum(axis=0)
    return G_L, H_L, N_L


class PlaintextStats:
    """Statistics straight from a pooled dataset"""

    def __init__(self, X: np.ndarray, g: np.ndarray, h: np.ndarray):
        self.X = X
        self.g = g
        self.h = h
        self.members: Dict[int, np.ndarray] = {0: np.arange(len(X))}

    def node_totals(self, node_id: int) -> NodeStats:
        idx = self.members[node_id]
        return NodeStats(float(self.g[idx].sum()), float(self.h[idx].sum()), int(len(idx)))

    def left_sums(self, node_id, candidates):
        idx = self.members[node_id]
        return left_sums_for(self.X[idx], self.g[idx], self.h[idx], candidates)

    def apply_split(self, node_id, candidate, left_id, right_id):
        idx = self.members.pop(node_id)
        go_left = self.X[idx, candidate.feature] < candidate.threshold
        self.members[left_id] = idx[go_left]
        self.members[right_id] = idx[~go_left]


# ---------------------------------------------------------------------------
# Boosted model and the plaintext trainer
# ---------------------------------------------------------------------------

@dataclass
class BoostedModel:
    params: BoostParams
    num_features: int
    trees: List[Cart] = field(default_factory=list)

    @property
    def num_outputs(self) -> int:
        return self.params.trees_per_round

    @property
    def rounds_trained(self) -> int:
        return len({t.round_index for t in self.trees})

    def initial_scores(self, n: int) -> np.ndarray:
        if self.num_outputs == 1:
            return np.full(n, self.params.base_score, dtype=np.float64)
        return np.full((n, self.num_outputs), self.params.base_score, dtype=np.float64)

    def predict_raw(self, X: np.ndarray, rounds: Optional[int] = None) -> np.ndarray:
        scores = self.initial_scores(len(X))
        for tree in self.trees:
            if rounds is not None and tree.round_index >= rounds:
                continue
            update = self.params.eta * tree.predict_batch(X)
            if scores.ndim == 1:
                scores += update
            else:
                scores[:, tree.class_index] += update
        return scores

    def staged_raw(self, X: np.ndarray) -> Iterator[np.ndarray]:
        """Raw scores after each completed round (round 0 is the base score)"""
        scores = self.initial_scores(len(X))
        yield scores.copy()
        for r in sorted({t.round_index for t in self.trees}):
            for tree in (t for t in self.trees if t.round_index == r):
                update = self.params.eta * tree.predict_batch(X)
                if scores.ndim == 1:
                    scores += update
                else:
                    scores[:, tree.class_index] += update
            yield scores.copy()

    def predict_labels(self, X: np.ndarray) -> np.ndarray:
        return labels_from_scores(self.predict_raw(X))

    def to_dict(self) -> dict:
        params = asdict(self.params)
        params["loss"] = self.params.loss.value
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "num_features": self.num_features,
            "params": params,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "BoostedModel":
        if data.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported model schema {data.get('schema_version')}")
        return cls(BoostParams(**data["params"]), int(data["num_features"]),
                   [Cart.from_dict(t) for t in data["trees"]])


def labels_from_scores(scores: np.ndarray) -> np.ndarray:
    if scores.ndim == 1:
        return (scores > 0).astype(np.int64)
    return np.argmax(scores, axis=1).astype(np.int64)


def accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(labels_from_scores(scores) == np.asarray(labels)))


def train_plaintext(X: np.ndarray, y: np.ndarray, params: BoostParams, seed: int,
                    candidate_table: Optional[Mapping[int, np.ndarray]] = None,
                    quantize: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                    on_round: Optional[Callable[[int, BoostedModel, np.ndarray], None]] = None
                    ) -> BoostedModel:
    """
    Reference trainer over pooled data

    Parameters:
    -----------
    X, y : np.ndarray
        Dense features and labels
    params : BoostParams
    seed : int
        Seed of the per-tree feature subsample stream
    candidate_table : dict, optional
        Public thresholds per feature; built from X when omitted
    quantize : callable, optional
        Applied to g and h before growth (the fixed-point grid the federation carries)
    on_round : callable, optional
        Called with (round, model, training scores) after each round
    """
    params.validate()
    X = np.asarray(X, dtype=np.float64)
    if candidate_table is None:
        candidate_table = build_candidate_table(X, params.max_candidates)
    model = BoostedModel(params, X.shape[1])
    scores = model.initial_scores(len(X))
    for k in range(params.rounds):
        g_all, h_all = compute_gradients(params.loss, scores, y)
        round_trees = []
        for c in range(params.trees_per_round):
            g = g_all if g_all.ndim == 1 else g_all[:, c]
            h = h_all if h_all.ndim == 1 else h_all[:, c]
            if quantize is not None:
                g, h = quantize(g), quantize(h)
            features = sample_features(X.shape[1], params.feature_subsample, seed, k, c)
            grower = TreeGrower(params, candidate_table, features, class_index=c, round_index=k)
            round_trees.append(grower.grow(PlaintextStats(X, g, h)))
        for tree in round_trees:
            update = params.eta * tree.predict_batch(X)
            if scores.ndim == 1:
                scores = scores + update
            else:
                scores[:, tree.class_index] = scores[:, tree.class_index] + update
        model.trees.extend(round_trees)
        logger.debug("plaintext round %d loss %.6f", k, loss_value(params.loss, scores, y))
        if on_round is not None:
            on_round(k, model, scores)
    return model
