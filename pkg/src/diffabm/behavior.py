"""Agent decision layer.

Per-step decisions come from prompt-driven providers. To keep provider usage
independent of population size, agents sharing a static attribute combination
(an archetype) share one estimated action probability per step; individual
actions are then Bernoulli draws from their archetype's probability.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError, EstimationError, ParseError, TemplateError
from .popgen import Population
from .rng import RngStream
from .stochastic import bernoulli_st
from .tape import ArrayLike

ACTIONS = ("isolate", "work")

DEFAULT_ARCHETYPE_ATTRS = ("age_band", "gender", "borough", "income_band", "occupation")

SYSTEM_TEXT = (
    "There is a novel disease. It spreads through contact. It is more dangerous"
    " to older people.\n"
    "People have the option to isolate at home or continue their usual"
    " recreational activities outside.\n"
    "Given this scenario, you must estimate your actions based on\n"
    "    1) the information you are given,\n"
    "    2) what you know about the general population with these attributes.\n"
    "\n"
    '"There isn\'t enough information" and "It is unclear" are not acceptable'
    " answers.\n"
    'Give a "Yes" or "No" answer, followed by a period. Give one sentence'
    " explaining your choice."
)

_USER_BODY = (
    "You are a {gender} of age {age}, living in the {location} region."
    " You work in {occupation} industry with a monthly income of {income}.\n"
    "\n"
    "The number of new cases in your neighborhood is {cases}, which is a"
    " {change}% change from the previous month. It has been {duration} months"
    " since the start of the pandemic.\n"
    "\n"
    "This month, you have received a stimulus payment of {payment} to support"
    " your living expenses.\n"
)

_NO_PAYMENT_LINE = "This month, you have not received any stimulus payment.\n"

_QUESTIONS = {
    "isolate": "Given these factors, do you choose to isolate at home?"
    " (isolation behavior)",
    "work": "Given these factors, do you choose to go to work this month?"
    " (employment behavior)",
}

_TAIL = (
    '"There isn\'t enough information" and "It is unclear" are not acceptable'
    " answers.\n"
    'Give a "Yes" or "No" answer, followed by a period. Give one sentence'
    " explaining your choice."
)


@dataclass(frozen=True)
class PromptTemplate:
    system_text: str
    user_text: str
    action: str
    no_payment_text: str = _NO_PAYMENT_LINE

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise DomainError(f"unknown action {self.action!r}")


def default_template(action: str) -> PromptTemplate:
    if action not in ACTIONS:
        raise DomainError(f"unknown action {action!r}")
    user = _USER_BODY + "\n" + _QUESTIONS[action] + "\n\n" + _TAIL
    return PromptTemplate(system_text=SYSTEM_TEXT, user_text=user, action=action)


@dataclass(frozen=True)
class BinningScheme:
    """Discretization of the global context fed into prompts."""

    change_edges: Tuple[float, ...] = (-25.0, -5.0, 5.0, 25.0)
    change_reps: Tuple[float, ...] = (-25.0, -15.0, 0.0, 15.0, 25.0)

    def bin_cases(self, cases: float) -> int:
        """Power-of-two bucket, represented by its lower bound."""
        c = max(0.0, float(cases))
        if c < 1.0:
            return 0
        return int(2 ** int(np.floor(np.log2(c))))

    def bin_change(self, pct: float) -> float:
        idx = int(np.searchsorted(self.change_edges, pct, side="right"))
        return self.change_reps[idx]


@dataclass(frozen=True)
class ContextBin:
    """Global per-step decision context, already discretized."""

    cases_bin: int
    change_pct_bin: float
    duration_months: int
    payment: float
    step: int

    def __post_init__(self):
        if self.duration_months < 0:
            raise DomainError("duration_months must be >= 0")

    @classmethod
    def from_raw(cls, cases, change_pct, duration_months, payment, step,
                 binning: Optional[BinningScheme] = None) -> "ContextBin":
        b = binning or BinningScheme()
        return cls(
            cases_bin=b.bin_cases(cases),
            change_pct_bin=b.bin_change(change_pct),
            duration_months=int(duration_months),
            payment=float(payment),
            step=int(step),
        )


def context_from_series(
    new_infections: np.ndarray,
    t: int,
    payment: float,
    binning: Optional[BinningScheme] = None,
    duration_offset_months: int = 0,
    initial: Optional[ContextBin] = None,
    window: int = 30,
) -> ContextBin:
    """Context for step ``t`` from the simulated new-infection series.

    Cases are summed over the trailing window ending at step t-1 and compared
    to the window before it; at t=0 the configured initial context is used.
    """
    if t == 0:
        if initial is None:
            raise DomainError("t=0 requires a configured initial context")
        return initial
    series = np.asarray(new_infections, dtype=float)[:t]
    recent = float(series[max(0, t - window) : t].sum())
    prev = float(series[max(0, t - 2 * window) : max(0, t - window)].sum())
    if prev > 0:
        change = 100.0 * (recent - prev) / prev
    else:
        change = 0.0 if recent == 0 else 100.0
    months = t // 30 + duration_offset_months
    return ContextBin.from_raw(recent, change, months, payment, t, binning)


@dataclass(frozen=True)
class ArchetypeKey:
    """Static attribute combination sharing one behavior distribution."""

    age_band: Optional[str] = None
    gender: Optional[str] = None
    borough: Optional[str] = None
    income_band: Optional[str] = None
    occupation: Optional[str] = None

    def bindings(self) -> Dict[str, str]:
        out = {}
        if self.gender is not None:
            out["gender"] = self.gender
        if self.age_band is not None:
            out["age"] = self.age_band
        if self.borough is not None:
            out["location"] = self.borough
        if self.income_band is not None:
            out["income"] = self.income_band
        if self.occupation is not None:
            out["occupation"] = self.occupation
        return out


_PLACEHOLDER = re.compile(r"\{(\w+)\}")


def render_prompt(tmpl: PromptTemplate, key: ArchetypeKey, ctx: ContextBin) -> str:
    """Deterministic prompt text from template + archetype + context."""

    def fmt_number(x: float) -> str:
        return str(int(x)) if float(x) == int(x) else str(x)

    user = tmpl.user_text
    if ctx.payment == 0 and "{payment}" in user:
        lines = user.split("\n")
        lines = [
            tmpl.no_payment_text.rstrip("\n") if "{payment}" in ln else ln
            for ln in lines
        ]
        user = "\n".join(lines)

    bindings = key.bindings()
    bindings.update(
        cases=str(ctx.cases_bin),
        change=fmt_number(ctx.change_pct_bin),
        duration=str(ctx.duration_months),
        payment=fmt_number(ctx.payment),
    )

    def substitute(match: re.Match) -> str:
        name = match.group(1)
        if name not in bindings:
            raise TemplateError(f"unbound placeholder {name}")
        return bindings[name]

    return _PLACEHOLDER.sub(substitute, user)


@dataclass(frozen=True)
class Decision:
    answer: bool
    rationale: str


_DECISION = re.compile(r'^\s*"?(yes|no)"?\s*[.!]\s*(.*)$', re.IGNORECASE | re.DOTALL)


def parse_decision(text: str) -> Decision:
    """Leading Yes/No token before the first period; the rest is rationale."""
    m = _DECISION.match(text or "")
    if m is None:
        raise ParseError(f"no leading Yes/No answer in {text[:60]!r}")
    return Decision(answer=m.group(1).lower() == "yes", rationale=m.group(2).strip())


def format_decision(d: Decision) -> str:
    return f"{'Yes' if d.answer else 'No'}. {d.rationale}"


@dataclass
class ArchetypeTable:
    """(key, context, action) -> estimated action probability."""

    entries: Dict[Tuple[ArchetypeKey, ContextBin, str], float] = field(
        default_factory=dict
    )
    sample_count: int = 1

    def __post_init__(self):
        if self.sample_count < 1:
            raise DomainError("sample count must be >= 1")

    def probability(self, key: ArchetypeKey, ctx: ContextBin, action: str) -> float:
        try:
            return self.entries[(key, ctx, action)]
        except KeyError:
            raise EstimationError(
                f"missing archetype entry for ({key}, step={ctx.step}, {action})",
                missing=[(key, ctx, action)],
            ) from None

    def set(self, key: ArchetypeKey, ctx: ContextBin, action: str, p: float) -> None:
        if not (0.0 <= p <= 1.0):
            raise DomainError("archetype probability outside [0, 1]")
        self.entries[(key, ctx, action)] = float(p)


def population_keys(
    pop: Population, attrs: Sequence[str] = DEFAULT_ARCHETYPE_ATTRS
) -> Tuple[List[ArchetypeKey], np.ndarray]:
    """Realized archetype keys and each agent's index into that list."""
    code_arrays = [getattr(pop, a) for a in attrs]
    dims = [len(pop.bins[a]) for a in attrs]
    combined = np.ravel_multi_index(tuple(code_arrays), dims)
    unique_codes, inverse = np.unique(combined, return_inverse=True)
    keys = []
    for code in unique_codes:
        coords = np.unravel_index(code, dims)
        kwargs = {a: pop.bins[a][int(c)] for a, c in zip(attrs, coords)}
        keys.append(ArchetypeKey(**kwargs))
    return keys, inverse


def estimate_archetype_probs(
    provider,
    keys: Sequence[ArchetypeKey],
    ctx: ContextBin,
    actions: Sequence[str],
    m_samples: int,
    templates: Optional[Mapping[str, PromptTemplate]] = None,
) -> ArchetypeTable:
    """Monte Carlo action probabilities per archetype: p = (#yes) / M.

    Issues exactly len(keys) x len(actions) x m_samples provider queries.
    A response that fails to parse is retried once; a second failure marks the
    entry missing and raises with the partial table attached.
    """
    if m_samples < 1:
        raise DomainError("m_samples must be >= 1")
    templates = templates or {a: default_template(a) for a in actions}
    table = ArchetypeTable(sample_count=m_samples)
    missing = []
    for action in actions:
        tmpl = templates[action]
        for key in keys:
            prompt = render_prompt(tmpl, key, ctx)
            yes = 0
            failed = False
            for _ in range(m_samples):
                text = provider.query(tmpl.system_text, prompt)
                try:
                    decision = parse_decision(text)
                except ParseError:
                    text = provider.query(tmpl.system_text, prompt)
                    try:
                        decision = parse_decision(text)
                    except ParseError:
                        failed = True
                        break
                yes += int(decision.answer)
            if failed:
                missing.append((key, ctx, action))
            else:
                table.set(key, ctx, action, yes / m_samples)
    if missing:
        raise EstimationError(
            f"{len(missing)} archetype entries unparseable after retry",
            missing=missing,
            partial=table,
        )
    return table


def sample_actions(
    table: ArchetypeTable,
    pop: Population,
    ctx: ContextBin,
    action: str,
    rng: RngStream,
    attrs: Sequence[str] = DEFAULT_ARCHETYPE_ATTRS,
    mean_field: bool = False,
) -> np.ndarray:
    """Per-agent action draws from archetype probabilities.

    Stochastic mode returns hard 0/1 draws addressed by agent id; mean-field
    returns each agent's probability unchanged (the expected action).
    """
    keys, inverse = population_keys(pop, attrs)
    p_by_key = np.array(
        [table.probability(k, ctx, action) for k in keys], dtype=float
    )
    p_agents = p_by_key[inverse]
    if mean_field:
        return p_agents
    return bernoulli_st(p_agents, rng, ids=pop.agent_ids)
