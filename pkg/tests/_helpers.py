"""Small builders shared by the test modules."""

import csv
from pathlib import Path

import numpy as np

from mdmap.graph import block_partition, lattice_graph, write_edge_list, write_partition
from mdmap.inference import CountPanel


def make_panel(graph, O, E, names=None):
    O = np.asarray(O)
    E = np.asarray(E, dtype=np.float64)
    if O.ndim == 1:
        O, E = O[:, None], E[:, None]
    names = names or tuple(f"d{j + 1}" for j in range(O.shape[1]))
    return CountPanel(O, E, names, graph.area_ids)


def poisson_panel(graph, J, seed, expected=15.0, spread=0.3):
    """Counts with log-normal risks around 1, for generic engine checks."""
    rng = np.random.default_rng(seed)
    E = np.full((graph.n_areas, J), float(expected))
    R = np.exp(rng.normal(0.0, spread, (graph.n_areas, J)))
    return make_panel(graph, rng.poisson(E * R), E)


def write_lattice_inputs(folder, nrow=6, ncol=6, blocks=(2, 2), J=2, seed=0, k=1, n_samples=100,
                         workers=1, strategy="original", partition=True, data=None):
    """Edge list, partition, counts and config for a lattice run; returns the config path."""
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    g = lattice_graph(nrow, ncol)
    write_edge_list(g, folder / "edges.tsv")
    write_partition(g, block_partition(nrow, ncol, *blocks), folder / "partition.tsv")
    if data is None:
        data = poisson_panel(g, J, seed)
    J = data.n_diseases
    with open(folder / "counts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area", "disease", "observed", "expected"])
        for j in range(J):
            for i, a in enumerate(g.area_ids):
                w.writerow([a, data.disease_names[j], int(data.observed[i, j]), repr(float(data.expected[i, j]))])
    part = "partition = partition.tsv\n" if partition else ""
    cfg = (
        f"[data]\nedges = edges.tsv\ncounts = counts.csv\n{part}\n"
        f"[model]\nk = {k}\nstrategy = {strategy}\n\n"
        f"[fit]\nn_samples = {n_samples}\n\n"
        f"[execution]\nworkers = {workers}\nseed = 7\n\n"
        "[output]\ndirectory = run\n"
    )
    (folder / "run.ini").write_text(cfg, encoding="utf-8")
    return folder / "run.ini"
