# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Plot learned quantizer state.

Reads the JSON written by ``adabin inspect --json`` and draws each binary layer's activation set
as a vertical bar from (beta_a - alpha_a) to (beta_a + alpha_a), with the per-filter weight
distances underneath.  Layers whose whole set is positive are drawn in red.

Given a metrics.jsonl file instead, it plots how every layer's activation set moved over training.

    python notes/plot_quantizers.py quantizers.json quantizers.png
    python notes/plot_quantizers.py runs/<run>/metrics.jsonl trajectories.png

Requires the optional plot extra (pip install adabin[plot]).
"""

import json
import sys
from typing import Any, Dict, List

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # pylint: disable=wrong-import-position


def _plot_report(report: Dict[str, Any], output: str) -> None:
    layers = report["layers"]
    names = [layer["name"] for layer in layers]
    x = list(range(len(layers)))
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(max(8, len(layers) * 0.45), 8), sharex=True)
    for index, layer in enumerate(layers):
        color = "tab:red" if layer["all_positive"] else "tab:blue"
        top.vlines(index, layer["low"], layer["high"], colors=color, linewidth=4)
        top.plot(index, layer["beta_a"], "k_", markersize=10)
    top.axhline(0.0, color="grey", linewidth=0.5)
    top.set_ylabel("activation set")
    top.set_title("Activation binary sets per layer (red: entirely positive)")
    alpha = [layer["weight_alpha"] for layer in layers]
    bottom.errorbar(
        x,
        [a["mean"] for a in alpha],
        yerr=[[a["mean"] - a["min"] for a in alpha], [a["max"] - a["mean"] for a in alpha]],
        fmt="o",
        capsize=3,
    )
    bottom.set_ylabel("weight alpha (min/mean/max)")
    bottom.set_xticks(x)
    bottom.set_xticklabels(names, rotation=90, fontsize=7)
    plt.tight_layout()
    fig.savefig(output, dpi=150, bbox_inches="tight")


def _plot_metrics(records: List[Dict[str, Any]], output: str) -> None:
    epochs = [record["epoch"] for record in records]
    names = list(records[0]["quantizers"]) if records else []
    fig, (left, right) = plt.subplots(1, 2, figsize=(12, 5))
    for name in names:
        left.plot(epochs, [record["quantizers"][name][0] for record in records], linewidth=1)
        right.plot(epochs, [record["quantizers"][name][1] for record in records], linewidth=1, label=name)
    left.set_title("alpha_a")
    right.set_title("beta_a")
    for ax in (left, right):
        ax.set_xlabel("epoch")
    right.legend(fontsize=6, ncol=2, loc="best")
    plt.tight_layout()
    fig.savefig(output, dpi=150, bbox_inches="tight")


def main(argv: List[str]) -> None:
    if len(argv) != 2:
        print("usage: plot_quantizers.py <inspect.json|metrics.jsonl> <output.png>")
        sys.exit(2)
    source, output = argv
    with open(source, "r", encoding="utf-8") as handle:
        if source.endswith(".jsonl"):
            _plot_metrics([json.loads(line) for line in handle if line.strip()], output)
        else:
            _plot_report(json.load(handle), output)
    print("wrote %s" % output)


if __name__ == "__main__":
    main(sys.argv[1:])
