"""Smoke test for the gossipgrid_py extension module.

Build first:  pip install --no-build-isolation -e crates/py
"""

import math

import gossipgrid_py as gg


def check(name, cond):
    print(("ok   " if cond else "FAIL ") + name)
    if not cond:
        raise SystemExit(1)


def main():
    ring = gg.Topology.from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
    w = ring.mixing_matrix()
    check("4-cycle weights are 1/3", all(abs(x - 1 / 3) < 1e-12 for x in (w.get(0, 0), w.get(0, 1), w.get(0, 3))))
    check("4-cycle second eigenvalue is 1/3", abs(w.second_eigenvalue_modulus() - 1 / 3) < 1e-9)
    check("row sums are one", all(abs(sum(r) - 1.0) < 1e-12 for r in w.to_list()))

    g = gg.Topology.regular(256, 6, seed=1)
    check("regular graph has n*d/2 edges", len(g.edges()) == 768 and g.is_connected())
    check("edge list round trips", gg.Topology.from_edge_list(g.to_edge_list()).edges() == g.edges())
    try:
        gg.Topology.regular(5, 3)
        check("odd n*d rejected", False)
    except ValueError:
        check("odd n*d rejected", True)

    models = [[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [1.0, 1.0]]
    mean = gg.all_reduce(models)
    check("all-reduce is the mean", mean == [1.0, 1.0])
    mixed = [gg.gossip_aggregate(models, w, i) for i in range(4)]
    check("gossip preserves the average", all(abs(a - b) < 1e-12 for a, b in zip(gg.all_reduce(mixed), mean)))

    trace = gg.builtin_trace("cifar10")
    check("cifar10 trace has four devices", len(trace) == 4)
    check("training probability caps at one", gg.training_probability(900, 500) == 1.0)
    check("planned rounds", gg.planned_training_rounds(4, 4, 1000) == 500)

    energy = gg.run(task="none", algorithm="dpsgd", n=256, degree=6, rounds=1000)
    check("D-PSGD energy-only total is 1510.04 Wh", abs(energy.total_energy_wh - 1510.04) < 0.01)
    skip = gg.run({"task": "none", "algorithm": "skiptrain", "n": 256, "degree": 6, "rounds": 1000})
    check("SkipTrain halves energy", math.isclose(skip.total_energy_wh, energy.total_energy_wh / 2, rel_tol=1e-9))

    small = dict(n=16, degree=4, rounds=16, classes=4, feature_dim=8, train_per_class=40, eval_per_class=20, seed=3)
    a = gg.run(small, algorithm="skiptrain-constrained", budget_scale=0.5)
    b = gg.run(small, algorithm="skiptrain-constrained", budget_scale=0.5)
    check("learning run reports accuracy", a.final_mean_accuracy is not None and 0.0 <= a.final_mean_accuracy <= 1.0)
    check("runs are reproducible", a.metrics_csv() == b.metrics_csv() and a.models() == b.models())
    check("records end at the last round", a.records()[-1]["round"] == 16)

    try:
        gg.run(n=0)
        check("bad config raises ValueError", False)
    except ValueError as e:
        check("bad config raises ValueError", "n" in str(e))

    grid = gg.grid_search([1, 2], [0, 1], small, algorithm="skiptrain")
    check("grid search fills every cell", len(grid["cells"]) == 4 and grid["best"] is not None)
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
