"""Append-only log of pruning iterations."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

FIELDS = (
    "iteration", "layer", "channel", "saliency", "remaining_maps", "maps_pruned_fraction",
    "flops", "gflops", "params", "train_loss", "train_accuracy", "test_accuracy",
)


@dataclass
class PruneRecord:
    iteration: int
    layer: int | None
    channel: int | None
    saliency: float | None
    remaining_maps: int
    maps_pruned_fraction: float
    flops: float
    params: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float | None

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def row(self):
        d = asdict(self)
        d["gflops"] = self.gflops
        return [d[f] for f in FIELDS]


@dataclass
class PruneTrace:
    """``initial`` describes the unpruned network; ``records`` hold one removal each."""

    initial: PruneRecord
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    stop_reason: str = ""

    def append(self, rec: PruneRecord):
        prev = self.records[-1] if self.records else self.initial
        if rec.remaining_maps != prev.remaining_maps - 1:
            raise ValueError("each trace record must remove exactly one feature map")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def all_records(self):
        return [self.initial] + self.records

    def at_fraction(self, fraction: float) -> PruneRecord:
        """First record whose pruned-maps fraction reaches ``fraction``."""
        for r in self.all_records():
            if r.maps_pruned_fraction >= fraction - 1e-12:
                return r
        raise ValueError(f"trace never reaches {fraction:.0%} maps pruned")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(FIELDS)
            for r in self.all_records():
                w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r.row()])

    def to_dict(self):
        return {
            "config": self.config,
            "stop_reason": self.stop_reason,
            "rows": [dict(zip(FIELDS, r.row())) for r in self.all_records()],
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d):
        recs = []
        for row in d["rows"]:
            row = {k: v for k, v in row.items() if k != "gflops"}
            recs.append(PruneRecord(**row))
        return cls(initial=recs[0], records=recs[1:], config=d.get("config", {}),
                   stop_reason=d.get("stop_reason", ""))
