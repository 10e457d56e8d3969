"""Categorical selector policy trained with direct preference optimization.

The action space is one selector action per channel, 27 tuples total.
A softmax-linear policy maps query features (length, triple count,
ambiguity, token budget, per-channel redundancy, model id one-hot) to
27 logits. Training data comes from eval logs: several action tuples
are tried per query, each scored by a utility that rewards accuracy and
faithfulness and charges for tokens and latency. Every strict utility
dominance within a query yields a preference pair, and the policy is
fit with the standard DPO objective against a frozen reference by
full-batch gradient descent with step halving.

At inference the policy maximizes logit minus eta times the action's
expected token cost, so sweeping eta trades answer quality against
prompt size, collapsing to all-not-include for large eta.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .codebook import Channel
from .errors import InvalidParams, IoError, NonFiniteLoss
from .selector import SelectorAction

__all__ = [
    "ActionTuple",
    "ALL_ACTIONS",
    "action_index",
    "action_from_index",
    "proxy_token_cost",
    "QueryFeatures",
    "EvalRecord",
    "UtilityWeights",
    "utility",
    "PreferencePair",
    "build_preference_pairs",
    "PolicyParams",
    "dpo_loss",
    "dpo_loss_and_grad",
    "train",
    "select_action",
    "calibrate_token_costs",
    "read_eval_log",
]

ActionTuple = Tuple[SelectorAction, SelectorAction, SelectorAction]

# channel order (question, answer, fact); per-channel order by lattice
# rank so index 0 is the all-not-include tuple
_PER_CHANNEL = (SelectorAction.NOT_INCLUDE, SelectorAction.UNIQUE,
                SelectorAction.INCLUDE_ALL)
ALL_ACTIONS: List[ActionTuple] = [tuple(t) for t in
                                  itertools.product(_PER_CHANNEL, repeat=3)]
_ACTION_INDEX = {t: i for i, t in enumerate(ALL_ACTIONS)}

_PROXY_CHANNEL_COST = {SelectorAction.NOT_INCLUDE: 0.0,
                       SelectorAction.UNIQUE: 2.0,
                       SelectorAction.INCLUDE_ALL: 3.0}


def action_index(action: ActionTuple) -> int:
    try:
        return _ACTION_INDEX[tuple(action)]
    except KeyError as exc:
        raise InvalidParams(f"not a valid action tuple: {action!r}") from exc


def action_from_index(index: int) -> ActionTuple:
    if not 0 <= index < len(ALL_ACTIONS):
        raise InvalidParams(f"action index {index} out of range")
    return ALL_ACTIONS[index]


def proxy_token_cost(action: ActionTuple) -> float:
    return sum(_PROXY_CHANNEL_COST[a] for a in action)


_FEATURE_NAMES = ("query_tokens", "triple_count", "ambiguity", "token_budget",
                  "redundancy_question", "redundancy_answer", "redundancy_fact")
# fixed scales keep gradient descent well conditioned across raw ranges
_FEATURE_SCALES = np.array([100.0, 10.0, 1.0, 1000.0, 1.0, 1.0, 1.0])


@dataclass
class QueryFeatures:
    query_tokens: float
    triple_count: float
    ambiguity: float
    token_budget: float
    redundancy: Dict[str, float] = field(default_factory=dict)
    model_id: str = "default"

    def vector(self, model_ids: Sequence[str]) -> np.ndarray:
        raw = np.array([
            self.query_tokens,
            self.triple_count,
            self.ambiguity,
            self.token_budget,
            self.redundancy.get(Channel.QUESTION.value, 0.0),
            self.redundancy.get(Channel.ANSWER.value, 0.0),
            self.redundancy.get(Channel.FACT.value, 0.0),
        ], dtype=np.float64)
        if not np.all(np.isfinite(raw)):
            raise InvalidParams(f"non-finite feature values: {raw}")
        one_hot = np.zeros(len(model_ids))
        if self.model_id in model_ids:
            one_hot[list(model_ids).index(self.model_id)] = 1.0
        return np.concatenate([raw / _FEATURE_SCALES, one_hot, [1.0]])


@dataclass
class EvalRecord:
    features: QueryFeatures
    action: ActionTuple
    acc: float
    faith: float
    tokens: float
    latency: float

    def __post_init__(self):
        if not 0.0 <= self.acc <= 1.0:
            raise InvalidParams(f"acc must be in [0, 1], got {self.acc}")
        if not 0.0 <= self.faith <= 1.0:
            raise InvalidParams(f"faith must be in [0, 1], got {self.faith}")
        if self.tokens < 0 or self.latency < 0:
            raise InvalidParams("tokens and latency must be >= 0")


@dataclass(frozen=True)
class UtilityWeights:
    alpha: float = 1.0
    beta: float = 5e-4
    gamma: float = 0.05
    delta: float = 0.5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.delta) < 0:
            raise InvalidParams("utility weights must be >= 0")


def utility(record: EvalRecord, weights: UtilityWeights = UtilityWeights()) -> float:
    return (weights.alpha * record.acc + weights.delta * record.faith
            - weights.beta * record.tokens - weights.gamma * record.latency)


@dataclass
class PreferencePair:
    features: QueryFeatures
    winner: ActionTuple
    loser: ActionTuple


def build_preference_pairs(groups: Mapping[str, Sequence[EvalRecord]],
                           weights: UtilityWeights = UtilityWeights()
                           ) -> List[PreferencePair]:
    """All ordered pairs with strict utility dominance, per query group."""
    pairs = []
    for _, records in groups.items():
        records = list(records)
        utils = [utility(r, weights) for r in records]
        for i in range(len(records)):
            for j in range(i + 1, len(records)):
                if utils[i] > utils[j]:
                    pairs.append(PreferencePair(records[i].features,
                                                records[i].action, records[j].action))
                elif utils[j] > utils[i]:
                    pairs.append(PreferencePair(records[j].features,
                                                records[j].action, records[i].action))
    return pairs


@dataclass
class PolicyParams:
    model_ids: List[str] = field(default_factory=list)
    weights: Optional[np.ndarray] = None
    ref_weights: Optional[np.ndarray] = None
    beta_dpo: float = 1.0
    eta: float = 0.0
    token_cost: Optional[np.ndarray] = None
    loss_history: List[float] = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return len(_FEATURE_NAMES) + len(self.model_ids) + 1

    def ensure_weights(self, seed: int = 0) -> np.ndarray:
        if self.weights is None:
            rng = np.random.default_rng(seed)
            self.weights = rng.normal(0.0, 0.01, size=(len(ALL_ACTIONS), self.feature_dim))
        if self.weights.shape != (len(ALL_ACTIONS), self.feature_dim):
            raise InvalidParams(
                f"weights shape {self.weights.shape} != "
                f"{(len(ALL_ACTIONS), self.feature_dim)}")
        return self.weights

    def effective_token_cost(self) -> np.ndarray:
        if self.token_cost is not None:
            return np.asarray(self.token_cost, dtype=np.float64)
        return np.array([proxy_token_cost(a) for a in ALL_ACTIONS])

    def save(self, path: str):
        doc = {
            "v": 1,
            "feature_names": list(_FEATURE_NAMES),
            "model_ids": self.model_ids,
            "weights": self.ensure_weights().tolist(),
            "ref_weights": None if self.ref_weights is None else self.ref_weights.tolist(),
            "beta_dpo": self.beta_dpo,
            "eta": self.eta,
            "token_cost": None if self.token_cost is None else
                list(np.asarray(self.token_cost, dtype=float)),
        }
        try:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(doc, fh)
        except OSError as exc:
            raise IoError(f"cannot write policy to {path}: {exc}") from exc

    @classmethod
    def load(cls, path: str) -> "PolicyParams":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise IoError(f"cannot read policy from {path}: {exc}") from exc
        if doc.get("v") != 1:
            raise IoError(f"unsupported policy version: {doc.get('v')!r}")
        params = cls(
            model_ids=[str(m) for m in doc["model_ids"]],
            weights=np.asarray(doc["weights"], dtype=np.float64),
            ref_weights=None if doc.get("ref_weights") is None else
                np.asarray(doc["ref_weights"], dtype=np.float64),
            beta_dpo=float(doc["beta_dpo"]),
            eta=float(doc["eta"]),
            token_cost=None if doc.get("token_cost") is None else
                np.asarray(doc["token_cost"], dtype=np.float64),
        )
        params.ensure_weights()
        return params


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _pair_arrays(pairs: Sequence[PreferencePair], params: PolicyParams
                 ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = np.stack([p.features.vector(params.model_ids) for p in pairs])
    wi = np.array([action_index(p.winner) for p in pairs])
    li = np.array([action_index(p.loser) for p in pairs])
    return X, wi, li


def _ref_margin(X: np.ndarray, wi: np.ndarray, li: np.ndarray,
                params: PolicyParams) -> np.ndarray:
    if params.ref_weights is None:
        # uniform reference: equal log-probs, margins vanish
        return np.zeros(len(wi))
    logp = _log_softmax(X @ params.ref_weights.T)
    rows = np.arange(len(wi))
    return logp[rows, wi] - logp[rows, li]


def dpo_loss(W: np.ndarray, X: np.ndarray, wi: np.ndarray, li: np.ndarray,
             ref_margin: np.ndarray, beta_dpo: float) -> float:
    logp = _log_softmax(X @ W.T)
    rows = np.arange(len(wi))
    h = beta_dpo * ((logp[rows, wi] - logp[rows, li]) - ref_margin)
    # -log sigmoid(h) == softplus(-h), computed stably
    return float(np.logaddexp(0.0, -h).mean())


def dpo_loss_and_grad(W: np.ndarray, X: np.ndarray, wi: np.ndarray, li: np.ndarray,
                      ref_margin: np.ndarray, beta_dpo: float
                      ) -> Tuple[float, np.ndarray]:
    """Loss plus its exact gradient.

    For a softmax-linear policy the log-prob difference of two actions
    under the same features is (W[w] - W[l]) @ x, so the log-partition
    terms cancel and the gradient touches only the two action rows.
    """
    logp = _log_softmax(X @ W.T)
    rows = np.arange(len(wi))
    h = beta_dpo * ((logp[rows, wi] - logp[rows, li]) - ref_margin)
    loss = float(np.logaddexp(0.0, -h).mean())
    coef = -(1.0 / (1.0 + np.exp(h))) * beta_dpo / len(wi)
    grad = np.zeros_like(W)
    np.add.at(grad, wi, coef[:, None] * X)
    np.add.at(grad, li, -coef[:, None] * X)
    return loss, grad


def train(pairs: Sequence[PreferencePair], params: PolicyParams,
          epochs: int = 300, lr: float = 1.0, seed: int = 0) -> PolicyParams:
    """Full-batch gradient descent with step halving; never lets loss rise."""
    if epochs < 0 or lr <= 0:
        raise InvalidParams("epochs must be >= 0 and lr > 0")
    out = PolicyParams(
        model_ids=list(params.model_ids),
        weights=None if params.weights is None else params.weights.copy(),
        ref_weights=params.ref_weights,
        beta_dpo=params.beta_dpo,
        eta=params.eta,
        token_cost=params.token_cost,
    )
    W = out.ensure_weights(seed)
    if not pairs:
        return out
    X, wi, li = _pair_arrays(pairs, out)
    ref_margin = _ref_margin(X, wi, li, out)

    loss, grad = dpo_loss_and_grad(W, X, wi, li, ref_margin, out.beta_dpo)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"initial loss is {loss}")
    out.loss_history = [loss]
    step = lr
    for _ in range(epochs):
        while True:
            W_new = W - step * grad
            new_loss = dpo_loss(W_new, X, wi, li, ref_margin, out.beta_dpo)
            if not math.isfinite(new_loss):
                raise NonFiniteLoss(f"loss became {new_loss}; lower the learning rate")
            if new_loss <= loss + 1e-9:
                break
            step /= 2.0
            if step < 1e-15:
                out.weights = W
                return out
        W = W_new
        loss = new_loss
        out.loss_history.append(loss)
        _, grad = dpo_loss_and_grad(W, X, wi, li, ref_margin, out.beta_dpo)
    out.weights = W
    return out


def select_action(features: QueryFeatures, params: PolicyParams) -> ActionTuple:
    """Argmax of logit - eta * expected tokens; ties go to the cheaper tuple."""
    W = params.ensure_weights()
    x = features.vector(params.model_ids)
    scores = W @ x - params.eta * params.effective_token_cost()
    cost = params.effective_token_cost()
    best = 0
    for i in range(1, len(ALL_ACTIONS)):
        if scores[i] > scores[best] + 1e-12:
            best = i
        elif abs(scores[i] - scores[best]) <= 1e-12 and \
                (cost[i], i) < (cost[best], best):
            best = i
    return ALL_ACTIONS[best]


def calibrate_token_costs(records: Iterable[EvalRecord]) -> np.ndarray:
    """Empirical mean tokens per action; proxy costs fill unseen actions."""
    sums = np.zeros(len(ALL_ACTIONS))
    counts = np.zeros(len(ALL_ACTIONS))
    for rec in records:
        idx = action_index(rec.action)
        sums[idx] += rec.tokens
        counts[idx] += 1
    cost = np.array([proxy_token_cost(a) for a in ALL_ACTIONS])
    seen = counts > 0
    cost[seen] = sums[seen] / counts[seen]
    return cost


_CSV_COLUMNS = ("query_id", "query_tokens", "triple_count", "ambiguity", "model_id",
                "token_budget", "redundancy_q", "redundancy_a", "redundancy_f",
                "action_q", "action_a", "action_f", "acc", "faith", "tokens", "latency")


def read_eval_log(path: str) -> Dict[str, List[EvalRecord]]:
    """Load an eval CSV into records grouped by query id, insertion ordered."""
    groups: Dict[str, List[EvalRecord]] = {}
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(_CSV_COLUMNS) - set(reader.fieldnames or [])
            if missing:
                raise IoError(f"{path}: missing columns {sorted(missing)}")
            for line_no, row in enumerate(reader, 2):
                try:
                    features = QueryFeatures(
                        query_tokens=float(row["query_tokens"]),
                        triple_count=float(row["triple_count"]),
                        ambiguity=float(row["ambiguity"]),
                        token_budget=float(row["token_budget"]),
                        redundancy={
                            Channel.QUESTION.value: float(row["redundancy_q"]),
                            Channel.ANSWER.value: float(row["redundancy_a"]),
                            Channel.FACT.value: float(row["redundancy_f"]),
                        },
                        model_id=row["model_id"].strip(),
                    )
                    record = EvalRecord(
                        features=features,
                        action=(SelectorAction.parse(row["action_q"]),
                                SelectorAction.parse(row["action_a"]),
                                SelectorAction.parse(row["action_f"])),
                        acc=float(row["acc"]),
                        faith=float(row["faith"]),
                        tokens=float(row["tokens"]),
                        latency=float(row["latency"]),
                    )
                except (ValueError, InvalidParams) as exc:
                    raise IoError(f"{path}:{line_no}: {exc}") from exc
                groups.setdefault(row["query_id"], []).append(record)
    except OSError as exc:
        raise IoError(f"cannot read eval log {path}: {exc}") from exc
    return groups
