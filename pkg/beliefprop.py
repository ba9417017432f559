"""
Sum-product belief propagation on discrete factor graphs, with a
brute-force enumeration oracle.

Messages live in the normalized linear domain, floored at 1e-300 before
each renormalization. The schedule is flooding: every round first updates
all variable-to-factor messages, then all factor-to-variable messages.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from errors import InvalidArgumentError, NumericDomainError, ResourceLimitError
from numkernel import RngStream

logger = logging.getLogger(__name__)

MESSAGE_FLOOR = 1e-300
MAX_JOINT_ALPHABET = 10**6


@dataclass(frozen=True)
class Factor:
    variables: Tuple[int, ...]
    table: np.ndarray


@dataclass
class FactorGraph:
    cardinalities: List[int]
    factors: List[Factor] = field(default_factory=list)

    def __post_init__(self):
        if any(c < 1 for c in self.cardinalities):
            raise InvalidArgumentError(f"cardinalities must be >= 1, got {self.cardinalities}")
        checked = []
        for index, factor in enumerate(self.factors):
            variables = tuple(int(v) for v in factor.variables)
            table = np.asarray(factor.table, dtype=float)
            if not variables or len(set(variables)) != len(variables):
                raise InvalidArgumentError(f"factor {index} needs distinct variables, got {variables}")
            if any(v < 0 or v >= len(self.cardinalities) for v in variables):
                raise InvalidArgumentError(f"factor {index} references a missing variable: {variables}")
            expected = tuple(self.cardinalities[v] for v in variables)
            if table.shape != expected:
                raise InvalidArgumentError(f"factor {index} table shape {table.shape}, expected {expected}")
            if not np.all(np.isfinite(table)) or np.any(table < 0) or not np.any(table > 0):
                raise InvalidArgumentError(f"factor {index} table must be finite, >= 0 and not all zero")
            checked.append(Factor(variables=variables, table=table))
        self.factors = checked

    @property
    def num_variables(self) -> int:
        return len(self.cardinalities)

    def neighbors(self) -> List[List[int]]:
        """Factor indices touching each variable."""
        adjacent: List[List[int]] = [[] for _ in self.cardinalities]
        for f, factor in enumerate(self.factors):
            for v in factor.variables:
                adjacent[v].append(f)
        return adjacent


@dataclass
class BPResult:
    marginals: List[np.ndarray]
    converged: bool
    iterations: int


def _normalize(message: np.ndarray) -> np.ndarray:
    message = np.maximum(message, MESSAGE_FLOOR)
    return message / message.sum()


def _factor_to_variable(factor: Factor, target: int, incoming: Dict[int, np.ndarray]) -> np.ndarray:
    """Sum out every other variable of the factor, weighted by its incoming message."""
    product = factor.table
    for axis, v in enumerate(factor.variables):
        if v == target:
            continue
        shape = [1] * product.ndim
        shape[axis] = product.shape[axis]
        product = product * incoming[v].reshape(shape)
    keep = factor.variables.index(target)
    others = tuple(a for a in range(product.ndim) if a != keep)
    return product.sum(axis=others) if others else product


def sum_product(g: FactorGraph, max_iters: int = 100, damping: float = 0.0, tol: float = 1e-12) -> BPResult:
    """
    Flooding sum-product with optional damping of factor-to-variable messages.

    Exact on acyclic graphs once max_iters reaches the graph diameter; on
    loopy graphs non-convergence is reported through ``converged``.
    """
    if not 0.0 <= damping < 1.0:
        raise InvalidArgumentError(f"damping must lie in [0, 1), got {damping}")
    if max_iters < 1:
        raise InvalidArgumentError(f"max_iters must be >= 1, got {max_iters}")
    adjacent = g.neighbors()
    uniform = [np.full(c, 1.0 / c) for c in g.cardinalities]
    to_var = {(f, v): uniform[v].copy() for f, factor in enumerate(g.factors) for v in factor.variables}

    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        to_factor = {}
        for v, fs in enumerate(adjacent):
            for f in fs:
                message = uniform[v].copy()
                for other in fs:
                    if other != f:
                        message = message * to_var[(other, v)]
                to_factor[(f, v)] = _normalize(message)

        change = 0.0
        updated = {}
        for f, factor in enumerate(g.factors):
            incoming = {v: to_factor[(f, v)] for v in factor.variables}
            for v in factor.variables:
                fresh = _normalize(_factor_to_variable(factor, v, incoming))
                if damping > 0.0:
                    fresh = _normalize((1.0 - damping) * fresh + damping * to_var[(f, v)])
                change = max(change, float(np.max(np.abs(fresh - to_var[(f, v)]))))
                updated[(f, v)] = fresh
        to_var = updated
        if change < tol:
            converged = True
            break
    if not converged:
        logger.warning(f"sum_product did not converge in {max_iters} rounds")

    marginals = []
    for v, fs in enumerate(adjacent):
        belief = uniform[v].copy()
        for f in fs:
            belief = belief * to_var[(f, v)]
        marginals.append(_normalize(belief))
    return BPResult(marginals=marginals, converged=converged, iterations=iterations)


def brute_force_marginals(g: FactorGraph) -> List[np.ndarray]:
    """Exact marginals by enumerating the full joint alphabet."""
    size = int(np.prod([float(c) for c in g.cardinalities]))
    if size > MAX_JOINT_ALPHABET:
        raise ResourceLimitError(f"joint alphabet of {size} states exceeds the {MAX_JOINT_ALPHABET} limit")
    joint = np.ones(tuple(g.cardinalities))
    for factor in g.factors:
        order = np.argsort(factor.variables)
        table = np.transpose(factor.table, order)
        shape = [1] * g.num_variables
        for v in factor.variables:
            shape[v] = g.cardinalities[v]
        joint = joint * table.reshape(shape)
    total = joint.sum()
    if total <= 0:
        raise NumericDomainError("factor product is zero everywhere; marginals are undefined")
    joint = joint / total
    axes = range(g.num_variables)
    return [joint.sum(axis=tuple(a for a in axes if a != v)) for v in axes]


def is_tree(g: FactorGraph) -> bool:
    """True when the bipartite variable/factor graph has no cycle."""
    parent = list(range(g.num_variables + len(g.factors)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for f, factor in enumerate(g.factors):
        node = g.num_variables + f
        for v in factor.variables:
            a, b = find(node), find(v)
            if a == b:
                return False
            parent[a] = b
    return True


def random_tree_graph(num_variables: int, max_cardinality: int, rng: RngStream) -> FactorGraph:
    """Random tree of pairwise factors with a unary factor on every variable."""
    if num_variables < 1 or max_cardinality < 1:
        raise InvalidArgumentError(f"need num_variables >= 1 and max_cardinality >= 1")
    gen = rng.generator()
    cards = [int(c) for c in gen.integers(min(2, max_cardinality), max_cardinality + 1, size=num_variables)]
    factors = []
    for v in range(1, num_variables):
        parent = int(gen.integers(0, v))
        factors.append(Factor((parent, v), gen.random((cards[parent], cards[v])) + 0.05))
    for v in range(num_variables):
        factors.append(Factor((v,), gen.random(cards[v]) + 0.05))
    return FactorGraph(cardinalities=cards, factors=factors)


def from_description(description: Dict[str, Any]) -> FactorGraph:
    """Build a graph from {"cardinalities": [...], "factors": [{"variables": [...], "table": nested}]}."""
    factors = [Factor(tuple(item["variables"]), np.asarray(item["table"], dtype=float))
               for item in description.get("factors", [])]
    return FactorGraph(cardinalities=list(description["cardinalities"]), factors=factors)


def max_marginal_deviation(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    return max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
