"""Optional PNG figures for CLI results (needs the ``plot`` extra)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    try:
        import matplotlib
    except ImportError:  # pragma: no cover - depends on the environment
        raise RuntimeError("plotting needs matplotlib: pip install 'actgradq[plot]'") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render(command: str, payload: dict, data, path: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        if command == "quantize":
            ax.hist(np.asarray(data["error"]).ravel(), bins=60)
            ax.set_xlabel("dequantized - input")
            ax.set_ylabel("count")
            ax.set_title(f"{payload['codec']} {payload['bit_width']}-bit roundtrip error")
        elif command == "error-sweep":
            groups = {}
            for r in data["reports"]:
                groups.setdefault((r.case, r.channel), {}).setdefault(r.epsilon_q, []).append(r)
            for (case, ch), by_eps in sorted(groups.items()):
                eps = sorted(by_eps)
                emp = [np.mean([r.empirical for r in by_eps[e]]) for e in eps]
                bnd = [np.mean([r.bound for r in by_eps[e]]) for e in eps]
                line, = ax.loglog(eps, emp, "o-", label=f"{case} {ch} empirical")
                ax.loglog(eps, bnd, "--", color=line.get_color(), label=f"{case} {ch} bound")
            ax.set_xlabel("epsilon_q")
            ax.set_ylabel("error (mean over trials)")
            ax.legend(fontsize=6)
        elif command == "layer-error":
            roles = list(payload["roles"])
            ax.bar(roles, [payload["roles"][r]["normalized_L2"] for r in roles])
            ax.set_ylabel("normalized L2 error")
            ax.tick_params(axis="x", rotation=45, labelsize=7)
        elif command == "dbca-plan":
            stages = payload["peak_check"]["stages"]
            idx = np.arange(len(stages))
            ax.bar(idx - 0.2, [s["count"] * 4 for s in stages], 0.4, label="uniform 4-bit")
            ax.bar(idx + 0.2, [s["bit_units"] for s in stages], 0.4, label="compensated")
            ax.axhline(payload["peak_check"]["budget_bit_units"], color="k", lw=0.8)
            ax.set_xlabel("stage")
            ax.set_ylabel("activation bits x mini-batches")
            ax.legend()
        elif command == "allreduce-sim":
            ax.plot(np.asarray(data["oracle"]).ravel(), np.asarray(data["result"]).ravel(), ".", ms=2)
            ax.set_xlabel("oracle sum")
            ax.set_ylabel(f"{payload['protocol']} result")
        elif command == "memory-table":
            schemes = list(payload["schemes"])
            bottom = np.zeros(len(schemes))
            for op in [k for k in next(iter(payload["schemes"].values())) if k != "Total"]:
                vals = np.array([payload["schemes"][s][op] for s in schemes])
                ax.bar(schemes, vals, bottom=bottom, label=op)
                bottom += vals
            ax.set_ylabel("activation memory (U)")
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
    finally:
        plt.close(fig)
    return path
