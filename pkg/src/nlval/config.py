"""Scenario configuration files.

INI-style text parsed with :mod:`configparser`. Sections and keys::

    [run]      mode, output, seed
    [market]   s0, r, vol_kind, vol
    [deal]     payoff, strike, amount, table, maturity, dividend,
               dividend_rate, alpha, rehypothecation
    [credit]   lambda_I, lambda_C, lgd_I, lgd_C
    [rates]    c_plus, c_minus, f_plus, f_minus, h_plus, h_minus
    [pde]      n_space, n_time, s_min, s_max, width, theta, picard_tol,
               picard_max_iter, rannacher_steps, hedge
    [mc]       n_paths, n_steps, seed, basis_degree, picard_inner,
               cond_threshold
    [sweep]    r, control_r
    [ledger]   n_paths, steps_per_year, seed

A time schedule is either one number (flat) or comma-separated
``start:value`` pairs, e.g. ``r = 0:0.01, 1:0.03``. Payoff tables use the
same pair syntax with prices as abscissae. Missing sections take defaults;
unknown keys are errors.
"""

from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .deal_spec import CreditSpec, DealSpec, Dividend, Payoff, RateLeg
from .errors import ConfigError
from .fbsde_mc import McConfig
from .market_model import MarketSpec, Schedule, VolModel
from .pde_engine import PdeConfig

MODES = ("value", "invariance", "mc_compare", "ledger", "representation")

_KEYS = {
    "run": {"mode", "output", "seed"},
    "market": {"s0", "r", "vol_kind", "vol"},
    "deal": {
        "payoff", "strike", "amount", "table", "maturity", "dividend",
        "dividend_rate", "alpha", "rehypothecation",
    },
    "credit": {"lambda_i", "lambda_c", "lgd_i", "lgd_c"},
    "rates": {"c_plus", "c_minus", "f_plus", "f_minus", "h_plus", "h_minus"},
    "pde": {
        "n_space", "n_time", "s_min", "s_max", "width", "theta", "picard_tol",
        "picard_max_iter", "rannacher_steps", "hedge",
    },
    "mc": {"n_paths", "n_steps", "seed", "basis_degree", "picard_inner", "cond_threshold"},
    "sweep": {"r", "control_r"},
    "ledger": {"n_paths", "steps_per_year", "seed"},
}

_HEADER = re.compile(r"^\s*\[([^\]]+)\]")
_KEY = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


@dataclass(frozen=True)
class GridSpec:
    n_space: int = 400
    n_time: int = 400
    s_min: float = 0.0
    s_max: float | None = None
    width: float = 5.0

    def refined(self, k: int) -> "GridSpec":
        return replace(self, n_space=(self.n_space - 1) * k + 1, n_time=self.n_time * k)


@dataclass(frozen=True)
class LedgerSpec:
    n_paths: int = 100
    steps_per_year: tuple[int, ...] = (50, 100, 200, 400)
    seed: int = 0


@dataclass(frozen=True)
class ScenarioConfig:
    market: MarketSpec
    deal: DealSpec
    pde: PdeConfig = PdeConfig()
    grid: GridSpec = GridSpec()
    hedge_mode: str = "delta"
    mc: McConfig = McConfig()
    sweep: tuple[float, ...] = ()
    control_sweep: tuple[float, ...] = ()
    ledger: LedgerSpec = LedgerSpec()
    output: str = "out"
    mode: str = "value"
    source_text: str = field(default="", repr=False, compare=False)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.source_text.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(
            self,
            mc=replace(self.mc, seed=seed),
            ledger=replace(self.ledger, seed=seed),
        )

    def with_mode(self, mode: str) -> "ScenarioConfig":
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}", "run", "mode")
        return replace(self, mode=mode)


def _line_index(text: str) -> dict[tuple[str, str], int]:
    out: dict[tuple[str, str], int] = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        m = _HEADER.match(line)
        if m:
            section = m.group(1).strip().lower()
            out[(section, "")] = no
            continue
        m = _KEY.match(line)
        if m and section is not None:
            out.setdefault((section, m.group(1).strip().lower()), no)
    return out


class _Reader:
    def __init__(self, parser: configparser.ConfigParser, lines: dict):
        self.parser = parser
        self.lines = lines

    def err(self, section, key, message) -> ConfigError:
        line = self.lines.get((section, key)) or self.lines.get((section, ""))
        return ConfigError(message, section, key, line)

    def raw(self, section, key):
        if not self.parser.has_section(section) or not self.parser.has_option(section, key):
            return None
        return self.parser.get(section, key).strip()

    def _typed(self, section, key, default, conv, kind):
        raw = self.raw(section, key)
        if raw is None:
            return default
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise self.err(section, key, f"expected {kind}, got {raw!r} ({exc})") from None

    def float(self, section, key, default=None):
        return self._typed(section, key, default, float, "a number")

    def int(self, section, key, default=None):
        return self._typed(section, key, default, int, "an integer")

    def str(self, section, key, default=None):
        return self._typed(section, key, default, str, "text")

    def bool(self, section, key, default=None):
        if self.raw(section, key) is None:
            return default
        try:
            return self.parser.getboolean(section, key)
        except ValueError:
            raise self.err(section, key, f"expected true/false, got {self.raw(section, key)!r}") from None

    def floats(self, section, key, default=()):
        return self._typed(section, key, default, _parse_floats, "comma-separated numbers")

    def schedule(self, section, key, default=None):
        return self._typed(section, key, default, parse_schedule, "a number or start:value pairs")


def _parse_floats(text: str) -> tuple[float, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(float(p) for p in parts)


def _parse_pairs(text: str) -> list[tuple[float, float]]:
    pairs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        a, sep, b = item.partition(":")
        if not sep:
            raise ValueError(f"pair {item!r} lacks ':'")
        pairs.append((float(a), float(b)))
    if not pairs:
        raise ValueError("empty pair list")
    return pairs


def parse_schedule(text: str) -> Schedule:
    """``0.02`` or ``0:0.01, 1:0.03`` to a Schedule."""
    text = text.strip()
    if ":" not in text:
        return Schedule.constant(float(text))
    return Schedule.from_pairs(_parse_pairs(text))


def format_schedule(schedule: Schedule) -> str:
    if len(schedule.values) == 1:
        return repr(schedule.values[0])
    return ", ".join(f"{a!r}:{b!r}" for a, b in schedule.to_pairs())


def _leg(rd: _Reader, name: str) -> RateLeg:
    plus = rd.schedule("rates", f"{name}_plus", Schedule.constant(0.0))
    minus = rd.schedule("rates", f"{name}_minus", plus)
    return RateLeg(plus, minus)


def parse_config(text: str) -> ScenarioConfig:
    """Parse configuration text; raises ConfigError with line diagnostics."""
    if not text.strip():
        raise ConfigError("configuration is empty")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], line=line) from None
    lines = _line_index(text)
    for section in parser.sections():
        if section not in _KEYS:
            raise ConfigError(f"unknown section", section, None, lines.get((section, "")))
        for key in parser.options(section):
            if key not in _KEYS[section]:
                raise ConfigError("unknown key", section, key, lines.get((section, key)))
    if not parser.has_section("market") or not parser.has_section("deal"):
        raise ConfigError("[market] and [deal] sections are required")
    rd = _Reader(parser, lines)

    s0 = rd.float("market", "s0")
    if s0 is None:
        raise rd.err("market", "s0", "missing")
    vol_kind = rd.str("market", "vol_kind", "proportional")
    vol_sched = rd.schedule("market", "vol")
    if vol_sched is None:
        raise rd.err("market", "vol", "missing")
    try:
        vol = VolModel(vol_kind, vol_sched)
        market = MarketSpec(s0, rd.schedule("market", "r", Schedule.constant(0.0)), vol)
    except ValueError as exc:
        raise rd.err("market", "vol_kind", str(exc)) from None

    kind = rd.str("deal", "payoff")
    if kind is None:
        raise rd.err("deal", "payoff", "missing")
    table = rd._typed("deal", "table", (), lambda t: tuple(_parse_pairs(t)), "price:value pairs")
    try:
        payoff = Payoff(
            kind,
            strike=rd.float("deal", "strike", 0.0),
            amount=rd.float("deal", "amount", 0.0),
            points=table,
        )
    except ValueError as exc:
        raise rd.err("deal", "payoff", str(exc)) from None
    try:
        dividend = Dividend(rd.str("deal", "dividend", "none"), rd.float("deal", "dividend_rate", 0.0))
    except ValueError as exc:
        raise rd.err("deal", "dividend", str(exc)) from None
    maturity = rd.float("deal", "maturity")
    if maturity is None:
        raise rd.err("deal", "maturity", "missing")
    credit = CreditSpec(
        lambda_I=rd.schedule("credit", "lambda_i", Schedule.constant(0.0)),
        lambda_C=rd.schedule("credit", "lambda_c", Schedule.constant(0.0)),
        lgd_I=rd.float("credit", "lgd_i", 0.0),
        lgd_C=rd.float("credit", "lgd_c", 0.0),
    )
    try:
        deal = DealSpec(
            payoff=payoff,
            maturity=maturity,
            dividend=dividend,
            alpha=rd.schedule("deal", "alpha", Schedule.constant(0.0)),
            credit=credit,
            leg_c=_leg(rd, "c"),
            leg_f=_leg(rd, "f"),
            leg_h=_leg(rd, "h"),
            rehypothecation=rd.bool("deal", "rehypothecation", True),
        )
    except ValueError as exc:
        raise rd.err("deal", "maturity", str(exc)) from None

    try:
        pde = PdeConfig(
            theta=rd.float("pde", "theta", 0.5),
            picard_tol=rd.float("pde", "picard_tol", 1e-10),
            picard_max_iter=rd.int("pde", "picard_max_iter", 50),
            rannacher_steps=rd.int("pde", "rannacher_steps", 2),
        )
    except ValueError as exc:
        raise rd.err("pde", None, str(exc)) from None
    grid = GridSpec(
        n_space=rd.int("pde", "n_space", 400),
        n_time=rd.int("pde", "n_time", 400),
        s_min=rd.float("pde", "s_min", 0.0),
        s_max=rd.float("pde", "s_max", None),
        width=rd.float("pde", "width", 5.0),
    )
    if grid.n_space < 3 or grid.n_time < 1:
        raise rd.err("pde", "n_space", "need n_space >= 3 and n_time >= 1")
    hedge = rd.str("pde", "hedge", "delta")
    if hedge not in ("delta", "none"):
        raise rd.err("pde", "hedge", f"expected delta or none, got {hedge!r}")

    seed = rd.int("run", "seed", 0)
    try:
        mc = McConfig(
            n_paths=rd.int("mc", "n_paths", 100_000),
            n_steps=rd.int("mc", "n_steps", 100),
            seed=rd.int("mc", "seed", seed),
            basis_degree=rd.int("mc", "basis_degree", 4),
            picard_inner=rd.int("mc", "picard_inner", 3),
            cond_threshold=rd.float("mc", "cond_threshold", 1e10),
        )
    except ValueError as exc:
        raise rd.err("mc", None, str(exc)) from None

    steps = rd._typed(
        "ledger", "steps_per_year", LedgerSpec.steps_per_year,
        lambda t: tuple(int(x) for x in _parse_floats(t)), "comma-separated integers",
    )
    ledger = LedgerSpec(
        n_paths=rd.int("ledger", "n_paths", 100),
        steps_per_year=steps,
        seed=rd.int("ledger", "seed", seed),
    )
    if ledger.n_paths < 1 or any(k < 1 for k in steps):
        raise rd.err("ledger", "steps_per_year", "path count and step levels must be positive")

    mode = rd.str("run", "mode", "value").replace("-", "_")
    if mode not in MODES:
        raise rd.err("run", "mode", f"unknown mode {mode!r}; expected one of {MODES}")
    sweep = rd.floats("sweep", "r", ())
    if mode == "invariance" and not sweep:
        raise rd.err("sweep", "r", "invariance mode needs a non-empty r sweep")

    return ScenarioConfig(
        market=market,
        deal=deal,
        pde=pde,
        grid=grid,
        hedge_mode=hedge,
        mc=mc,
        sweep=sweep,
        control_sweep=rd.floats("sweep", "control_r", ()),
        ledger=ledger,
        output=rd.str("run", "output", "out"),
        mode=mode,
        source_text=text,
    )


def load_config(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)
