"""Allocation of a fixed annotation-time budget across label granularities."""

from __future__ import annotations

from dataclasses import dataclass, field

POLICIES = ("STRONG-B", "STRONG-M", "EQUAL", "EQUAL-NUM")

# Published allocations for a 66000 s budget. They disagree with floor (or any
# single) rounding of the per-scan costs, so they are shown for comparison only.
REFERENCE_COUNTS = {
    "STRONG-B": {"box": 217, "mask": 0, "dot": 0},
    "STRONG-M": {"box": 0, "mask": 105, "dot": 0},
    "EQUAL": {"box": 72, "mask": 97, "dot": 35},
    "EQUAL-NUM": {"box": 57, "mask": 57, "dot": 57},
}

DISCREPANCY_NOTE = (
    "counts use floor rounding of budget / cost; the reference allocations "
    "(e.g. 217 boxes for STRONG-B at 66000 s / 305 s) are not reachable with any "
    "single rounding rule and are listed for comparison only"
)


@dataclass(frozen=True)
class BudgetPolicy:
    name: str
    budget_seconds: float = 66000.0
    costs: dict = field(default_factory=lambda: {"dot": 228.0, "box": 305.0, "mask": 629.0})

    def __post_init__(self):
        object.__setattr__(self, "name", self.name.upper())
        if self.name not in POLICIES:
            raise ValueError(f"unknown policy {self.name!r}; expected one of {POLICIES}")
        if self.budget_seconds < 0:
            raise ValueError("budget must be >= 0")
        if set(self.costs) != {"dot", "box", "mask"} or any(c <= 0 for c in self.costs.values()):
            raise ValueError("costs must be positive for dot, box and mask")


@dataclass
class BudgetPlan:
    policy: str
    counts: dict[str, int]
    spent_seconds: float
    unused_seconds: float
    note: str = DISCREPANCY_NOTE

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "counts": dict(self.counts),
            "spent_seconds": self.spent_seconds,
            "unused_seconds": self.unused_seconds,
            "reference_counts": REFERENCE_COUNTS.get(self.policy),
            "note": self.note,
        }

    def table(self) -> str:
        ref = REFERENCE_COUNTS[self.policy]
        lines = [f"policy {self.policy}", f"{'type':<6}{'scans':>7}{'reference':>11}"]
        for g in ("box", "mask", "dot"):
            lines.append(f"{g:<6}{self.counts[g]:>7}{ref[g]:>11}")
        lines.append(f"spent {self.spent_seconds:.0f} s, unused {self.unused_seconds:.0f} s")
        lines.append(f"note: {self.note}")
        return "\n".join(lines)


def budget_plan(policy: BudgetPolicy) -> BudgetPlan:
    b, c = float(policy.budget_seconds), policy.costs
    counts = {"box": 0, "mask": 0, "dot": 0}
    if policy.name == "STRONG-B":
        counts["box"] = int(b // c["box"])
    elif policy.name == "STRONG-M":
        counts["mask"] = int(b // c["mask"])
    elif policy.name == "EQUAL":
        third = b / 3.0
        for g in counts:
            counts[g] = int(third // c[g])
    else:
        n = int(b // (c["dot"] + c["box"] + c["mask"]))
        counts = {g: n for g in counts}
    spent = sum(counts[g] * c[g] for g in counts)
    return BudgetPlan(policy.name, counts, spent, b - spent)
