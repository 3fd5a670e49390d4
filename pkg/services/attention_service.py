# polarseg/services/attention_service.py
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from api.models import AttentionRecord, AttentionReport, ChannelAttention, Sample
from config import logger
from core.errors import AttentionUnavailableError, InputValidationError
from core.tensor import no_grad
from nn.eafnet import STAGE_NAMES, EAFNet
from services.dataset_service import branch_inputs
from services.evaluation_service import pad_to_multiple

PathLike = Union[str, Path]


def collect_attention(model: EAFNet, samples: Sequence[Sample], channel_stage: Optional[str] = "layer3",
                      channels: Optional[int] = None) -> AttentionReport:
    """
    Mean EAC weight per (stage, branch) over channels and samples, in eval mode.
    channel_stage selects the stage whose per-channel weights are also reported, all of
    them unless `channels` limits the dump to the first ones.
    """
    if not model.is_fused:
        raise AttentionUnavailableError("single-branch model has no attention",
                                        details={"branches": model.branch_names})
    if not samples:
        raise InputValidationError("collect_attention needs at least one sample")
    if channel_stage is not None and channel_stage not in STAGE_NAMES:
        raise InputValidationError(f"Unknown stage '{channel_stage}'", details={"stages": list(STAGE_NAMES)})

    sums: Dict[Tuple[str, str], np.ndarray] = {}
    model.eval()
    with no_grad():
        for sample in samples:
            model([pad_to_multiple(x) for x in branch_inputs([sample], model.cfg.branches)], record_attention=True)
            for key, weights in model.last_attention.items():
                per_channel = weights.astype(np.float64).mean(axis=0)
                sums[key] = per_channel if key not in sums else sums[key] + per_channel

    records: List[AttentionRecord] = []
    dump: List[ChannelAttention] = []
    for stage in STAGE_NAMES:
        for branch in model.branch_names:
            per_channel = sums[(stage, branch)] / len(samples)
            records.append(AttentionRecord(stage=stage, branch=branch, mean_weight=float(per_channel.mean())))
            if stage == channel_stage:
                dump.extend(ChannelAttention(stage=stage, branch=branch, channel=c, weight=float(w))
                            for c, w in enumerate(per_channel[:channels]))
    logger.info(f"Collected attention over {len(samples)} samples for branches {model.branch_names}")
    return AttentionReport(records=records, channels=dump)


def plot_attention_curves(report: AttentionReport, path: PathLike) -> Path:
    """Mean attention weight per fusion stage, one curve per branch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lookup = report.lookup()
    branches = list(dict.fromkeys(r.branch for r in report.records))
    fig, ax = plt.subplots(figsize=(6, 4))
    for branch in branches:
        ax.plot(range(len(STAGE_NAMES)), [lookup[(stage, branch)] for stage in STAGE_NAMES], marker="o", label=branch)
    ax.set_xticks(range(len(STAGE_NAMES)))
    ax.set_xticklabels(STAGE_NAMES)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("fusion stage")
    ax.set_ylabel("mean attention weight")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
