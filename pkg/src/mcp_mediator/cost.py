"""Token cost model: agent-in-the-loop versus design-once, trigger-many execution.

All totals are integers and all ratios are ``Fraction``; rounding happens only
when a value is rendered.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

DEFAULT_INPUT_PER_STEP = 500
DEFAULT_OUTPUT_PER_STEP = 100
DEFAULT_DESIGN_COST = 54_000
DEFAULT_EXEC_COST = 150


class CostDomainError(ValueError):
    pass


@dataclass(frozen=True)
class Phase:
    """One phase of an agent-driven run; token figures are phase totals."""

    label: str
    steps: int
    input_tokens: int
    output_tokens: int

    def __post_init__(self) -> None:
        for name in ("steps", "input_tokens", "output_tokens"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value!r}")

    @property
    def total(self) -> int:
        return self.input_tokens + self.output_tokens


def unit_phase(label: str, steps: int, input_per_step: int = DEFAULT_INPUT_PER_STEP,
               output_per_step: int = DEFAULT_OUTPUT_PER_STEP) -> Phase:
    """A phase costed at a flat per-step rate."""
    return Phase(label, steps, steps * input_per_step, steps * output_per_step)


def _phases(per_namespace_steps: int) -> tuple[Phase, ...]:
    return (
        Phase("Tool discovery & planning", 3, 1_500, 2_500),
        Phase("Cluster-scoped fetches", 5, 5_000, 2_500),
        Phase("Namespace enumeration", 1, 500, 1_200),
        unit_phase("Per-namespace resource fetches", per_namespace_steps),
        unit_phase("Graph node creation loops", 800),
        unit_phase("Relationship creation", 760),
        Phase("Error recovery & re-planning", 15, 15_000, 3_000),
        Phase("Summary synthesis", 1, 5_000, 1_000),
    )


# 38 namespaces x 12 kinds in the summary table, 38 x 15 in the worked derivation
TABLE_PHASES = _phases(38 * 12)
APPENDIX_PHASES = _phases(38 * 15)


def agent_cost(phases: Iterable[Phase]) -> int:
    """Flat per-run agent cost: the sum of every phase's input and output tokens."""
    return sum(p.total for p in phases)


@dataclass(frozen=True)
class StepTokens:
    reason: int
    call: int
    result: int


def agent_cost_quadratic(steps: Sequence[StepTokens], task_tokens: int = 0) -> int:
    """Agent cost with accumulated context: step i re-reads every earlier result."""
    total = task_tokens
    context = 0
    for step in steps:
        total += context + step.reason + step.call
        context += step.result
    return total


@dataclass(frozen=True)
class CostModelInputs:
    phases: tuple[Phase, ...] = TABLE_PHASES
    design_cost: int = DEFAULT_DESIGN_COST
    exec_cost: int = DEFAULT_EXEC_COST
    per_step_input: int = DEFAULT_INPUT_PER_STEP
    per_step_output: int = DEFAULT_OUTPUT_PER_STEP
    agent_cost_override: int | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        for name in ("design_cost", "exec_cost", "per_step_input", "per_step_output"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value!r}")

    @property
    def agent_cost(self) -> int:
        if self.agent_cost_override is not None:
            return self.agent_cost_override
        return agent_cost(self.phases)


PRESETS = {
    "table": CostModelInputs(TABLE_PHASES),
    "appendix": CostModelInputs(APPENDIX_PHASES),
}


def agent_total(k: int, inputs: CostModelInputs) -> int:
    return k * inputs.agent_cost


def engine_total(k: int, inputs: CostModelInputs) -> int:
    if k < 0:
        raise CostDomainError("K must be non-negative")
    return inputs.design_cost + k * inputs.exec_cost


def savings(k: int, inputs: CostModelInputs) -> Fraction:
    """Fraction of agent tokens saved over K runs."""
    if k < 1:
        raise CostDomainError("K must be at least 1")
    agent = agent_total(k, inputs)
    if agent <= 0:
        raise CostDomainError("agent cost must be positive")
    return Fraction(agent - engine_total(k, inputs), agent)


def break_even(inputs: CostModelInputs) -> Fraction:
    """Number of runs (possibly fractional) after which design cost is recovered."""
    margin = inputs.agent_cost - inputs.exec_cost
    if margin <= 0:
        raise CostDomainError("agent cost per run must exceed execution cost")
    return Fraction(inputs.design_cost, margin)


def marginal_savings(inputs: CostModelInputs) -> Fraction:
    if inputs.agent_cost <= 0:
        raise CostDomainError("agent cost must be positive")
    return Fraction(inputs.agent_cost - inputs.exec_cost, inputs.agent_cost)


def smallest_k(target: Fraction, inputs: CostModelInputs) -> int:
    """Smallest integer K >= 1 whose savings reach ``target``."""
    target = Fraction(target)
    # savings(K) >= t  <=>  K * (a * (1 - t) - e) >= d
    slope = inputs.agent_cost * (1 - target) - inputs.exec_cost
    if slope <= 0:
        raise CostDomainError(f"savings never reach {float(target):.4%}")
    k = max(1, -(-Fraction(inputs.design_cost) // slope))
    return int(k)


def round_half_up(value: Fraction, decimals: int) -> Fraction:
    """Round to ``decimals`` places, halves away from zero."""
    scale = 10 ** decimals
    magnitude = math.floor(abs(value) * scale + Fraction(1, 2))
    return Fraction(-magnitude if value < 0 else magnitude, scale)


def format_fixed(value: Fraction, decimals: int) -> str:
    rounded = round_half_up(value, decimals)
    sign = "-" if rounded < 0 else ""
    rounded = abs(rounded)
    whole, frac = divmod(rounded.numerator * 10 ** decimals // rounded.denominator, 10 ** decimals)
    return f"{sign}{whole}.{frac:0{decimals}d}" if decimals else f"{sign}{whole}"


def format_percent(fraction: Fraction, decimals: int | None = None) -> str:
    """Percent text without the sign.

    By default one decimal place is used, adding places only while rounding
    would otherwise show a value below 100% as 100.
    """
    pct = Fraction(fraction) * 100
    if decimals is not None:
        return format_fixed(pct, decimals)
    decimals = 1
    while pct < 100 and round_half_up(pct, decimals) >= 100 and decimals < 12:
        decimals += 1
    return format_fixed(pct, decimals)


@dataclass(frozen=True)
class AmortizationRow:
    k: int
    agent_total: int
    engine_total: int
    savings: Fraction

    @property
    def savings_pct(self) -> str:
        return format_percent(self.savings)


def amortization_table(inputs: CostModelInputs, ks: Iterable[int]) -> list[AmortizationRow]:
    return [AmortizationRow(k, agent_total(k, inputs), engine_total(k, inputs), savings(k, inputs)) for k in ks]


def emit_tables(inputs: CostModelInputs, ks: Iterable[int]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["K", "agentTotal", "engineTotal", "savingsPct"])
    for row in amortization_table(inputs, ks):
        writer.writerow([row.k, row.agent_total, row.engine_total, row.savings_pct])
    return buf.getvalue()


def render_table(inputs: CostModelInputs, ks: Iterable[int]) -> str:
    rows = amortization_table(inputs, ks)
    lines = [f"{'K':>5}  {'Agent total':>15}  {'Engine total':>12}  {'Savings':>8}"]
    for r in rows:
        lines.append(f"{r.k:>5}  {r.agent_total:>15,}  {r.engine_total:>12,}  {r.savings_pct + '%':>8}")
    return "\n".join(lines)
