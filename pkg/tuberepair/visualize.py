"""Heatmap slice figures of evaluated crops."""
from __future__ import annotations

import io
import logging

import numpy as np
from matplotlib.figure import Figure

from tuberepair.heatmap import HeatmapTensor, KeypointTarget, argmax_coord
from tuberepair.metrics import DEFAULT_LAMBDA, EvalRecord, oks_k
from tuberepair.util import PathLike, atomic_write_bytes

logger = logging.getLogger(__name__)

COLUMNS = ("input", "predicted", "ground truth")


def slice_index(target: KeypointTarget, pred: HeatmapTensor, k: int) -> int:
    """z plane of the ground-truth keypoint, or of the predicted peak when the keypoint is not in the crop."""
    if target.visibility[k]:
        return int(target.coords[k][0])
    return int(argmax_coord(pred.data[k])[0])


def heatmap_figure(inputs: np.ndarray, pred: HeatmapTensor, gt: HeatmapTensor, target: KeypointTarget,
                   record: EvalRecord, lam: float = DEFAULT_LAMBDA) -> Figure:
    """One row per keypoint: input, predicted and ground-truth heatmap slices through the keypoint plane.

    Row titles carry the branch radius, branch volume, OKS in percent and the keypoint distance.
    """
    rows = pred.channels
    figure = Figure(figsize=(3.0 * len(COLUMNS), 3.0 * rows))
    axes = figure.subplots(rows, len(COLUMNS), squeeze=False)
    merged = np.max(inputs, axis=0)
    for k in range(rows):
        z = slice_index(target, pred, k)
        panels = (merged[z], pred.data[k, z], gt.data[k, z])
        for column, (name, panel) in enumerate(zip(COLUMNS, panels)):
            ax = axes[k][column]
            ax.imshow(panel, cmap="gray" if column == 0 else "magma", origin="lower")
            ax.set_xticks([])
            ax.set_yticks([])
            if column == 0:
                ax.set_ylabel(f"KP{k + 1}, z={z}")
            if target.visibility[k] and column != 1:
                ax.plot([target.coords[k][2]], [target.coords[k][1]], marker="+", color="cyan")
        d = record.distances[k]
        oks = f"{100.0 * oks_k(d, record.branch_volume_S, lam):.1f}%" if record.visibility[k] else "n/a"
        axes[k][1].set_title(f"r={record.branch_mean_radius:.2f} S={record.branch_volume_S:g} "
                             f"OKS={oks} d={d:.2f}", fontsize=8)
    figure.suptitle(f"{record.sample_id} crop {record.crop_index}")
    return figure


def save_heatmap_figure(figure: Figure, path: PathLike) -> None:
    buffer = io.BytesIO()
    figure.savefig(buffer, format="png", dpi=100)
    atomic_write_bytes(path, buffer.getvalue())
    logger.debug("figure %s written", path)
