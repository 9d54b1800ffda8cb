"""Run manifests, result tables and SVG figures."""

import csv
import json
import os
import platform
import time

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "RunManifest",
    "TABLE_CSV_HEADER",
    "ORACLE_CSV_HEADER",
    "write_table_csv",
    "read_table_csv",
    "write_oracle_summary",
    "plot_trajectories_svg",
    "plot_report_svg",
    "dump_json",
    "fmt",
]

TABLE_CSV_HEADER = ["Pt", "QE", "Delta", "V0_hat", "V0_bar", "B1", "B2", "B3"]
ORACLE_CSV_HEADER = ["N", "x0", "V0_oracle"]


def fmt(x):
    """Shortest round-trip decimal; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def dump_json(doc, fh):
    json.dump(doc, fh, indent=1, sort_keys=True, allow_nan=False)
    fh.write("\n")


class RunManifest:
    """Manifest written before any result and rewritten after every phase."""

    def __init__(self, path, config, command, tool_version):
        self.path = path
        self.doc = {
            "command": command,
            "config": config,
            "tool_version": tool_version,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "status": "running",
            "phases": [],
            "artifacts": [],
            "failed_phase": None,
            "error": None,
            "results": {},
        }
        self._t0 = None
        self._phase = None
        self.write()

    def write(self):
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            dump_json(self.doc, fh)
        os.replace(tmp, self.path)

    def start(self, phase):
        self._phase = phase
        self._t0 = time.perf_counter()
        self.doc["phases"].append({"name": phase, "status": "running"})
        self.write()

    def finish(self, **info):
        entry = self.doc["phases"][-1]
        entry.update(info)
        entry["status"] = "ok"
        entry["wall_seconds"] = round(time.perf_counter() - self._t0, 6)
        self._phase = None
        self.write()

    def artifact(self, path):
        """Record a result file; call before writing it."""
        self.doc["artifacts"].append(os.path.basename(path))
        self.write()
        return path

    def fail(self, exc):
        self.doc["status"] = "failed"
        self.doc["failed_phase"] = self._phase
        self.doc["error"] = f"{type(exc).__name__}: {exc}"
        if self.doc["phases"] and self._phase is not None:
            self.doc["phases"][-1]["status"] = "failed"
        self.write()

    def close(self):
        self.doc["status"] = "ok"
        self.write()


def write_table_csv(fh, rows):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(TABLE_CSV_HEADER)
    for row in rows:
        writer.writerow([fmt(row.get(k)) for k in TABLE_CSV_HEADER])


def read_table_csv(fh):
    reader = csv.DictReader(fh)
    if reader.fieldnames != TABLE_CSV_HEADER:
        raise ValueError(f"unexpected table header {reader.fieldnames}")
    rows = []
    for rec in reader:
        rows.append({k: (None if rec[k] == "" else (int(rec[k]) if k == "Pt" else float(rec[k]))) for k in TABLE_CSV_HEADER})
    return rows


def write_oracle_summary(fh, N, x0, V0):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(ORACLE_CSV_HEADER)
    writer.writerow([N, fmt(x0), fmt(V0)])


def _svg_rc():
    return {"svg.hashsalt": "pdmpstop", "svg.fonttype": "none", "path.simplify": False}


def _save_svg(fig, fh):
    fig.savefig(fh, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def trajectory_polyline(model, traj, component=0):
    """Piecewise-linear path of one state component, ``NaN``-separated at jumps.

    Returns ``(t, x, jump_t, jump_x)`` where the jump arrays mark post-jump points.
    """
    Z = traj.post_jump_states
    S = traj.interjump_times
    T = np.cumsum(S)
    ts, xs = [], []
    for k in range(len(S) - 1):
        end = model.flow(Z[k][None, :], np.array([S[k + 1]]))[0, component]
        ts += [T[k], T[k + 1], np.nan]
        xs += [Z[k, component], end, np.nan]
    return np.array(ts), np.array(xs), T[1:], Z[1:, component]


def plot_trajectories_svg(fh, model, trajectories, component=0):
    """State against time for each trajectory, flow segments joined by jump markers."""
    with plt.rc_context(_svg_rc()):
        fig, ax = plt.subplots(figsize=(7, 4))
        for i, traj in enumerate(trajectories):
            t, x, jt, jx = trajectory_polyline(model, traj, component)
            (line,) = ax.plot(t, x, lw=1.2, label=f"trajectory {i}", gid=f"trajectory-{i}")
            ax.plot(jt, jx, "o", ms=3, color=line.get_color())
        ax.set_xlabel("t")
        ax.set_ylabel("X(t)")
        if trajectories:
            ax.legend(loc="lower right", fontsize="small")
        fig.tight_layout()
        _save_svg(fig, fh)


def plot_report_svg(fh, rows, oracle_V0=None):
    """Approximate and simulated values against codebook size."""
    rows = sorted(rows, key=lambda r: r["Pt"])
    pts = [r["Pt"] for r in rows]
    with plt.rc_context(_svg_rc()):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(pts, [r["V0_hat"] for r in rows], "o-", label="V0_hat")
        ax.plot(pts, [r["V0_bar"] for r in rows], "s-", label="V0_bar")
        if oracle_V0 is not None:
            ax.axhline(oracle_V0, color="k", ls="--", lw=1, label="oracle V0")
        ax.set_xscale("log")
        ax.set_xlabel("points per stage")
        ax.set_ylabel("value")
        ax.legend(fontsize="small")
        fig.tight_layout()
        _save_svg(fig, fh)
