"""
Finite structural causal models evaluated by exhaustive enumeration.

A DiscreteSCM holds, for every variable, its cardinality (values 0..card-1),
its parents and a conditional probability table shaped
(*parent cardinalities, card). Interventions are graph surgery: do() replaces
a variable's table with a point mass and drops its incoming edges, and the
joint of the mutilated model is the interventional distribution.

The oracle checks the back-door adjustment

    P(T | do(X = x)) = sum_c P(T | X = x, C = c) P(C = c)

and the three do-calculus rules against brute-force enumeration.
"""
import itertools
import math
from typing import Dict, Mapping, Sequence, Tuple

import networkx as nx
import numpy as np
import toml
from gym import logger
from gym.utils import seeding

from caformer.errors import ConfigError, ContractError, SizeError, UndefinedConditionalError

MAX_JOINT_CELLS = 10 ** 6
ROW_TOLERANCE = 1e-12
EQUALITY_TOLERANCE = 1e-12
MAX_CARDINALITY = 4

# parent lists of the graphs the oracle is exercised on
FIXTURES = {
    # X -> T -> D with the environment C confounding T and D
    "environment": {"X": (), "C": (), "T": ("X", "C"), "D": ("T", "C")},
    "confounded": {"C": (), "X": ("C",), "T": ("C", "X")},
    "chain": {"X": (), "Z": ("X",), "Y": ("Z",)},
    "fork": {"Z": (), "X": ("Z",), "Y": ("Z",)},
    "disconnected": {"X": (), "Z": (), "Y": ()},
}


class DiscreteSCM(object):
    """
    Description:
        Finite-alphabet causal DAG with one conditional probability table per
        variable.

    Invariants:
        The graph is acyclic and every table row sums to 1 within 1e-12.
    """

    def __init__(self, cards: Mapping[str, int], parents: Mapping[str, Sequence[str]], cpts: Mapping[str, np.ndarray]):
        self.variables = tuple(cards)
        self.cards = {v: int(cards[v]) for v in self.variables}
        self.parents = {v: tuple(parents.get(v, ())) for v in self.variables}
        self.graph = nx.DiGraph()
        self.graph.add_nodes_from(self.variables)
        for child, pa in self.parents.items():
            for parent in pa:
                if parent not in self.cards:
                    raise ContractError("%s has unknown parent %r" % (child, parent))
                self.graph.add_edge(parent, child)
        if not nx.is_directed_acyclic_graph(self.graph):
            raise ContractError("parent lists contain a cycle: %s" % nx.find_cycle(self.graph))

        self.cpts = {}
        for v in self.variables:
            if self.cards[v] < 1:
                raise ContractError("%s has an empty alphabet" % v)
            if v not in cpts:
                raise ContractError("no table for %s" % v)
            table = np.asarray(cpts[v], dtype=np.float64)
            shape = tuple(self.cards[p] for p in self.parents[v]) + (self.cards[v],)
            if table.shape != shape:
                raise ContractError("%s: table shape %s, expected %s" % (v, table.shape, shape))
            if (table < 0).any():
                raise ContractError("%s: negative probabilities" % v)
            worst = np.max(np.abs(table.sum(axis=-1) - 1.0))
            if worst > ROW_TOLERANCE:
                raise ContractError("%s: table rows deviate from 1 by %.3g" % (v, worst))
            self.cpts[v] = table

    def __repr__(self):
        edges = ", ".join("%s->%s" % e for e in self.graph.edges)
        return "DiscreteSCM(%s; %s)" % (", ".join("%s:%d" % (v, self.cards[v]) for v in self.variables), edges)

    @property
    def size(self):
        return math.prod(self.cards.values())

    def check_names(self, *names):
        for name in names:
            if name not in self.cards:
                raise ContractError("unknown variable %r, model has %s" % (name, self.variables))

    def check_value(self, name, value):
        self.check_names(name)
        if not 0 <= int(value) < self.cards[name]:
            raise ContractError("%s=%r outside alphabet 0..%d" % (name, value, self.cards[name] - 1))


class Distribution(object):
    """A table over the named variables, one axis per variable."""

    def __init__(self, variables, table):
        self.variables = tuple(variables)
        self.table = np.asarray(table, dtype=np.float64)
        assert self.table.ndim == len(self.variables), "%d axes for %d variables" % (self.table.ndim, len(self.variables))

    def marginal(self, names):
        names = tuple(names)
        missing = [n for n in names if n not in self.variables]
        if missing:
            raise ContractError("variables %s not in distribution over %s" % (missing, self.variables))
        drop = tuple(i for i, v in enumerate(self.variables) if v not in names)
        kept = [v for v in self.variables if v in names]
        table = self.table.sum(axis=drop) if drop else self.table
        return Distribution(names, np.transpose(table, [kept.index(n) for n in names]))

    def prob(self, **assignment):
        marginal = self.marginal(tuple(assignment))
        return float(marginal.table[tuple(int(v) for v in assignment.values())])

    def conditional(self, targets, given: Mapping[str, int]):
        """P(targets | given) as an array over the target axes."""
        targets = tuple(targets)
        given = dict(given)
        joint = self.marginal(targets + tuple(given))
        index = (slice(None),) * len(targets) + tuple(int(v) for v in given.values())
        sliced = joint.table[index]
        mass = sliced.sum()
        if mass == 0.0:
            raise UndefinedConditionalError(given)
        return sliced / mass


def joint(scm: DiscreteSCM):
    """Product of all tables over every assignment, axes in scm.variables order."""
    if scm.size > MAX_JOINT_CELLS:
        raise SizeError("joint has %d cells, limit is %d" % (scm.size, MAX_JOINT_CELLS))
    axis = {v: i for i, v in enumerate(scm.variables)}
    operands = []
    for v in scm.variables:
        operands.append(scm.cpts[v])
        operands.append([axis[p] for p in scm.parents[v]] + [axis[v]])
    table = np.einsum(*operands, list(range(len(scm.variables))))
    return Distribution(scm.variables, table)


def do(scm: DiscreteSCM, interventions: Mapping[str, int]):
    """Mutilated model with each intervened variable fixed to a point mass."""
    parents = dict(scm.parents)
    cpts = dict(scm.cpts)
    for name, value in interventions.items():
        scm.check_value(name, value)
        point = np.zeros(scm.cards[name])
        point[int(value)] = 1.0
        parents[name] = ()
        cpts[name] = point
    return DiscreteSCM(scm.cards, parents, cpts)


def truncated_do(scm: DiscreteSCM, var, value):
    """Interventional distribution over every other variable under do(var = value)."""
    dist = joint(do(scm, {var: value}))
    return dist.marginal(tuple(v for v in scm.variables if v != var))


def backdoor_estimate(scm: DiscreteSCM, x, treatment="X", outcome="T", adjustment=("C",)):
    """
    sum_c P(outcome | treatment = x, adjustment = c) P(adjustment = c), from the
    observational joint. The adjustment set must satisfy the back-door
    criterion for (treatment, outcome).
    """
    adjustment = tuple(adjustment)
    scm.check_names(treatment, outcome, *adjustment)
    scm.check_value(treatment, x)
    if not satisfies_backdoor(scm.graph, treatment, outcome, adjustment):
        raise ContractError("%s does not satisfy the back-door criterion for %s -> %s" % (adjustment, treatment, outcome))
    observed = joint(scm)
    strata = observed.marginal(adjustment)
    estimate = np.zeros(scm.cards[outcome])
    for values in itertools.product(*(range(scm.cards[c]) for c in adjustment)):
        stratum = dict(zip(adjustment, values))
        stratum_with_x = dict(stratum)
        stratum_with_x[treatment] = int(x)
        if observed.marginal((treatment,) + adjustment).table[(int(x),) + values] == 0.0:
            raise UndefinedConditionalError(stratum_with_x)
        estimate += observed.conditional((outcome,), stratum_with_x) * strata.table[values]
    return estimate


# graph surgery and d-separation


def cut_incoming(graph, nodes):
    cut = graph.copy()
    cut.remove_edges_from([(u, v) for u, v in graph.edges if v in set(nodes)])
    return cut


def cut_outgoing(graph, nodes):
    cut = graph.copy()
    cut.remove_edges_from([(u, v) for u, v in graph.edges if u in set(nodes)])
    return cut


def d_separated(graph, xs, ys, zs=()):
    """
    Reachability with collider rules: a trail may pass a collider only when the
    collider or one of its descendants is observed, and may pass any other node
    only when it is unobserved.
    """
    xs, ys, zs = set(xs), set(ys), set(zs)
    observed_ancestry = set(zs)
    for z in zs:
        observed_ancestry |= nx.ancestors(graph, z)

    visited = set()
    reachable = set()
    frontier = [(x, "up") for x in xs]
    while frontier:
        node, direction = frontier.pop()
        if (node, direction) in visited:
            continue
        visited.add((node, direction))
        if node not in zs:
            reachable.add(node)
        if direction == "up" and node not in zs:
            frontier.extend((p, "up") for p in graph.predecessors(node))
            frontier.extend((c, "down") for c in graph.successors(node))
        elif direction == "down":
            if node not in zs:
                frontier.extend((c, "down") for c in graph.successors(node))
            if node in observed_ancestry:
                frontier.extend((p, "up") for p in graph.predecessors(node))
    return not (reachable & ys)


def satisfies_backdoor(graph, treatment, outcome, adjustment):
    """No adjustment variable descends from treatment, and adjustment blocks every back-door path."""
    if set(adjustment) & nx.descendants(graph, treatment):
        return False
    return d_separated(cut_outgoing(graph, [treatment]), [treatment], [outcome], adjustment)


# do-calculus


def _max_gap(left, right, strata):
    """Largest gap between two conditional tables over the strata where both are defined."""
    worst = 0.0
    compared = 0
    for stratum in strata:
        try:
            a, b = left(stratum), right(stratum)
        except UndefinedConditionalError:
            continue
        worst = max(worst, float(np.max(np.abs(a - b))))
        compared += 1
    return worst, compared


def verify_docalculus_rules(scm: DiscreteSCM, x, z, y, w=()):
    """
    Test the premise of each do-calculus rule by d-separation on the mutilated
    graph; where it holds, compare both sides by enumeration over every value of
    x, z and w. Rules whose premise fails are reported "not applicable".
    """
    w = tuple(w)
    scm.check_names(x, z, y, *w)
    g_x = cut_incoming(scm.graph, [x])
    z_not_ancestral = [n for n in [z] if not any(n in nx.ancestors(g_x, node) for node in w)]
    premises = {
        "rule1": d_separated(g_x, [y], [z], (x,) + w),
        "rule2": d_separated(cut_outgoing(g_x, [z]), [y], [z], (x,) + w),
        "rule3": d_separated(cut_incoming(g_x, z_not_ancestral), [y], [z], (x,) + w),
    }

    def observed(dist, given):
        return dist.conditional((y,), given)

    def joint_do(interventions):
        return joint(do(scm, interventions))

    report = {}
    for rule, premise in premises.items():
        if not premise:
            report[rule] = {"premise": False, "status": "not applicable", "max_abs_diff": None, "strata": 0}
            continue
        worst, compared = 0.0, 0
        for xv, zv in itertools.product(range(scm.cards[x]), range(scm.cards[z])):
            base = joint_do({x: xv})
            strata = [dict(zip(w, vals)) for vals in itertools.product(*(range(scm.cards[n]) for n in w))]
            if rule == "rule1":
                left = lambda s: observed(base, dict(s, **{z: zv}))
                right = lambda s: observed(base, s)
            else:
                both = joint_do({x: xv, z: zv})
                left = lambda s: observed(both, s)
                if rule == "rule2":
                    right = lambda s: observed(base, dict(s, **{z: zv}))
                else:
                    right = lambda s: observed(base, s)
            gap, n = _max_gap(left, right, strata)
            worst, compared = max(worst, gap), compared + n
        status = "verified" if worst < EQUALITY_TOLERANCE else "failed"
        report[rule] = {"premise": True, "status": status, "max_abs_diff": worst, "strata": compared}
    return report


# random models and the equivalence suite


def random_scm(parents: Mapping[str, Sequence[str]], rng, max_card=MAX_CARDINALITY, cards=None):
    """Cardinalities drawn from 2..max_card unless given; table rows from a symmetric Dirichlet(1)."""
    if cards is None:
        cards = {v: int(rng.choice(np.arange(2, max_card + 1))) for v in parents}
    cpts = {}
    for v in parents:
        shape = tuple(cards[p] for p in parents[v])
        rows = rng.dirichlet(np.ones(cards[v]), size=max(1, math.prod(shape)))
        rows = rows / rows.sum(axis=-1, keepdims=True)
        cpts[v] = rows.reshape(shape + (cards[v],))
    return DiscreteSCM(cards, parents, cpts)


def fixture_scm(name, seed, max_card=MAX_CARDINALITY):
    if name not in FIXTURES:
        raise ContractError("unknown fixture %r, expected one of %s" % (name, tuple(FIXTURES)))
    rng, _ = seeding.np_random(int(seed))
    return random_scm(FIXTURES[name], rng, max_card=max_card)


def _backdoor_gap(scm, treatment, outcome):
    worst = 0.0
    for value in range(scm.cards[treatment]):
        truth = truncated_do(scm, treatment, value).marginal((outcome,)).table
        estimate = backdoor_estimate(scm, value, treatment=treatment, outcome=outcome, adjustment=("C",))
        worst = max(worst, float(np.max(np.abs(truth - estimate))))
    return worst


def verify_backdoor_suite(trials=100, seed=1, max_card=MAX_CARDINALITY):
    """
    Compare the back-door estimate with the truncated-graph oracle on `trials`
    random models of the environment graph, for both X -> T and T -> D, and
    check the do-calculus rules on the chain, fork and disconnected graphs.
    """
    if trials < 1:
        raise ContractError("trials must be >= 1, got %r" % trials)
    rng, _ = seeding.np_random(int(seed))
    worst = 0.0
    for _ in range(trials):
        scm = random_scm(FIXTURES["environment"], rng, max_card=max_card)
        worst = max(worst, _backdoor_gap(scm, "X", "T"), _backdoor_gap(scm, "T", "D"))
    rules = {}
    for name in ("chain", "fork", "disconnected"):
        scm = random_scm(FIXTURES[name], rng, max_card=max_card)
        rules[name] = verify_docalculus_rules(scm, "X", "Z", "Y")
    failed = [(name, rule) for name, report in rules.items() for rule, r in report.items() if r["status"] == "failed"]
    passed = worst < EQUALITY_TOLERANCE and not failed
    if not passed:
        logger.warn("back-door suite failed: max_abs_diff=%.3g, failed rules %s", worst, failed)
    return {"trials": int(trials), "seed": int(seed), "max_abs_diff": worst, "tolerance": EQUALITY_TOLERANCE,
            "passed": bool(passed), "rules": rules}


# definition files


def load_scm(path):
    """
    Read a TOML model definition:

        [variables.T]
        card = 2
        parents = ["X", "C"]
        cpt = [[0.9, 0.1], [0.2, 0.8], ...]   # one row per parent assignment, row-major
    """
    try:
        document = toml.load(path)
    except (toml.TomlDecodeError, OSError) as exc:
        raise ConfigError("cannot read model definition %s: %s" % (path, exc)) from None
    variables = document.get("variables")
    if not variables:
        raise ConfigError("%s: no [variables.*] tables" % path)
    cards, parents, cpts = {}, {}, {}
    for name, entry in variables.items():
        unknown = set(entry) - {"card", "parents", "cpt"}
        if unknown:
            raise ConfigError("%s: variable %s has unknown keys %s" % (path, name, sorted(unknown)))
        missing = {"card", "cpt"} - set(entry)
        if missing:
            raise ConfigError("%s: variable %s lacks %s" % (path, name, sorted(missing)))
        cards[name] = int(entry["card"])
        parents[name] = tuple(entry.get("parents", ()))
        cpts[name] = np.asarray(entry["cpt"], dtype=np.float64)
    for name in cpts:
        shape = tuple(cards[p] for p in parents[name] if p in cards) + (cards[name],)
        if cpts[name].size != math.prod(shape):
            raise ConfigError("%s: %s has %d table entries, expected %d" % (path, name, cpts[name].size, math.prod(shape)))
        cpts[name] = cpts[name].reshape(shape)
    return DiscreteSCM(cards, parents, cpts)


def dump_scm(scm: DiscreteSCM, path):
    variables = {}
    for v in scm.variables:
        variables[v] = {"card": scm.cards[v], "parents": list(scm.parents[v]),
                        "cpt": scm.cpts[v].reshape(-1, scm.cards[v]).tolist()}
    with open(path, "w") as fh:
        toml.dump({"variables": variables}, fh)
