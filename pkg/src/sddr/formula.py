"""Model-formula mini-language and validated model specifications.

One formula per distribution parameter, in source order::

    response ~ term (+ term)*

with terms

=====================  =============================================
``1``                  intercept
``name``               linear effect of a feature
``s(name[, df=R])``    penalized spline smooth, optional df target
``te(a, b[, df=R])``   tensor-product smooth of two features
``re(name)``           random intercept per level of a grouping feature
``d(trunk: a, b, …)``  deep trunk on one or more features
=====================  =============================================

The grammar is whitespace-insensitive and deliberately has no operator
other than ``+``. A df left unset stays unset here; it is resolved
globally by the smoothing module once all blocks are known.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field


class FormulaError(ValueError):
    """Raised on any formula syntax or validation problem.

    Carries the byte ``offset`` into the offending formula string, or -1
    for errors that are not tied to a position (e.g. arity mismatches).
    """

    def __init__(self, message: str, offset: int = -1):
        self.offset = offset
        if offset >= 0:
            message = f"{message} (offset {offset})"
        super().__init__(message)


# ---------------------------------------------------------------------------
# Term expressions
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TermExpr:
    """Base class for parsed formula terms."""

    def features(self) -> tuple[str, ...]:
        """Feature names this term reads from the data."""
        return ()

    def render(self) -> str:
        raise NotImplementedError

    def key(self):
        """Identity used for duplicate detection."""
        raise NotImplementedError


@dataclass(frozen=True)
class Intercept(TermExpr):
    def render(self) -> str:
        return "1"

    def key(self):
        return ("intercept",)


@dataclass(frozen=True)
class Linear(TermExpr):
    feature: str

    def features(self):
        return (self.feature,)

    def render(self) -> str:
        return self.feature

    def key(self):
        return ("linear", self.feature)


@dataclass(frozen=True)
class Smooth(TermExpr):
    feature: str
    df: float | None = None  # None = unset, resolved by smoothing module

    def features(self):
        return (self.feature,)

    def render(self) -> str:
        if self.df is None:
            return f"s({self.feature})"
        return f"s({self.feature}, df={self.df!r})"

    def key(self):
        return ("smooth", self.feature)


@dataclass(frozen=True)
class TensorSmooth(TermExpr):
    feature_a: str
    feature_b: str
    df: float | None = None

    def features(self):
        return (self.feature_a, self.feature_b)

    def render(self) -> str:
        if self.df is None:
            return f"te({self.feature_a}, {self.feature_b})"
        return f"te({self.feature_a}, {self.feature_b}, df={self.df!r})"

    def key(self):
        return ("tensor", self.feature_a, self.feature_b)


@dataclass(frozen=True)
class RandomEffect(TermExpr):
    feature: str

    def features(self):
        return (self.feature,)

    def render(self) -> str:
        return f"re({self.feature})"

    def key(self):
        return ("re", self.feature)


@dataclass(frozen=True)
class Deep(TermExpr):
    trunk: str
    inputs: tuple[str, ...]

    def features(self):
        return self.inputs

    def render(self) -> str:
        return f"d({self.trunk}: {', '.join(self.inputs)})"

    def key(self):
        return ("deep", self.trunk) + self.inputs


_TERM_FUNCTIONS = ("s", "te", "re", "d")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER_RE = re.compile(r"[0-9]+(\.[0-9]*)?([eE][+-]?[0-9]+)?|\.[0-9]+([eE][+-]?[0-9]+)?")


class _Cursor:
    """Minimal scanner over a formula string, tracking byte offsets."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def eof(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, char: str):
        self.skip_ws()
        if self.pos >= len(self.text) or self.text[self.pos] != char:
            raise FormulaError(f"expected '{char}'", self.pos)
        self.pos += 1

    def try_char(self, char: str) -> bool:
        self.skip_ws()
        if self.pos < len(self.text) and self.text[self.pos] == char:
            self.pos += 1
            return True
        return False

    def ident(self, what: str = "identifier") -> tuple[str, int]:
        self.skip_ws()
        m = _IDENT_RE.match(self.text, self.pos)
        if m is None:
            raise FormulaError(f"expected {what}", self.pos)
        self.pos = m.end()
        return m.group(0), m.start()

    def number(self) -> tuple[float, int]:
        self.skip_ws()
        m = _NUMBER_RE.match(self.text, self.pos)
        if m is None:
            raise FormulaError("expected a number", self.pos)
        self.pos = m.end()
        return float(m.group(0)), m.start()


def _parse_df(cur: _Cursor) -> float | None:
    """Parse an optional ', df=R' tail inside a smooth term."""
    if not cur.try_char(","):
        return None
    name, off = cur.ident("'df'")
    if name != "df":
        raise FormulaError(f"unexpected argument '{name}', only df= is allowed", off)
    cur.expect("=")
    df, off = cur.number()
    if df <= 0:
        raise FormulaError(f"df must be > 0, got {df}", off)
    return df


def _parse_term(cur: _Cursor) -> TermExpr:
    cur.skip_ws()
    start = cur.pos
    if cur.try_char("1"):
        return Intercept()
    name, off = cur.ident("term")
    if not cur.try_char("("):
        return Linear(name)
    # function-style term; an immediately closed argument list is an error
    # reported at the start of the term
    if name not in _TERM_FUNCTIONS:
        raise FormulaError(f"unknown term function '{name}'", off)
    if cur.peek() == ")":
        raise FormulaError(f"empty argument list for '{name}'", start)
    if name == "s":
        feat, _ = cur.ident("feature name")
        df = _parse_df(cur)
        cur.expect(")")
        return Smooth(feat, df)
    if name == "te":
        feat_a, _ = cur.ident("feature name")
        cur.expect(",")
        feat_b, _ = cur.ident("feature name")
        df = _parse_df(cur)
        cur.expect(")")
        return TensorSmooth(feat_a, feat_b, df)
    if name == "re":
        feat, _ = cur.ident("grouping feature name")
        cur.expect(")")
        return RandomEffect(feat)
    # deep term: d(trunk: f1, f2, ...)
    trunk, _ = cur.ident("trunk name")
    cur.expect(":")
    inputs = []
    feat, off = cur.ident("feature name")
    inputs.append(feat)
    while cur.try_char(","):
        feat, off = cur.ident("feature name")
        if feat in inputs:
            raise FormulaError(f"duplicate feature '{feat}' in deep term", off)
        inputs.append(feat)
    cur.expect(")")
    return Deep(trunk, tuple(inputs))


def parse_model_formula(text: str) -> tuple[str, list[TermExpr]]:
    """Parse a full formula, returning ``(response, terms)``."""
    cur = _Cursor(text)
    response, _ = cur.ident("response name")
    cur.expect("~")
    terms = [_parse_term(cur)]
    seen = {terms[0].key()}
    while cur.try_char("+"):
        cur.skip_ws()
        start = cur.pos
        term = _parse_term(cur)
        if term.key() in seen:
            raise FormulaError(f"duplicate term '{term.render()}'", start)
        seen.add(term.key())
        terms.append(term)
    if not cur.eof():
        raise FormulaError("unexpected trailing input", cur.pos)
    return response, terms


def parse_formula(text: str) -> list[TermExpr]:
    """Parse a formula string into its term list (source order)."""
    return parse_model_formula(text)[1]


def render_formula(response: str, terms: list[TermExpr] | tuple[TermExpr, ...]) -> str:
    return f"{response} ~ " + " + ".join(t.render() for t in terms)


# ---------------------------------------------------------------------------
# Trunk configuration and the validated spec
# ---------------------------------------------------------------------------
_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class TrunkSpec:
    """Architecture of one deep trunk: hidden widths and activation.

    The last hidden width is the latent dimension fed (through the
    orthogonalization cell, when required) into the linear head.
    """

    units: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.units) == 0:
            raise FormulaError("trunk needs at least one hidden layer")
        if any((not isinstance(u, int)) or u < 1 for u in self.units):
            raise FormulaError(f"trunk units must be positive integers, got {self.units}")
        if self.activation not in _ACTIVATIONS:
            raise FormulaError(
                f"unknown activation '{self.activation}', choose from {_ACTIVATIONS}"
            )


def _normalize_trunk(name: str, config) -> TrunkSpec:
    if isinstance(config, TrunkSpec):
        return config
    if isinstance(config, (list, tuple)):
        return TrunkSpec(tuple(int(u) for u in config))
    if isinstance(config, dict):
        unknown = set(config) - {"units", "activation"}
        if unknown:
            raise FormulaError(f"unknown trunk keys {sorted(unknown)} for '{name}'")
        if "units" not in config:
            raise FormulaError(f"trunk '{name}' needs 'units'")
        return TrunkSpec(
            tuple(int(u) for u in config["units"]),
            config.get("activation", "relu"),
        )
    raise FormulaError(f"cannot interpret trunk config for '{name}': {config!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Validated model description: one term list per distribution parameter."""

    response: str
    parameter_formulas: tuple[tuple[TermExpr, ...], ...]
    family: str
    trunks: dict[str, TrunkSpec] = field(default_factory=dict)

    @property
    def n_parameters(self) -> int:
        return len(self.parameter_formulas)

    def render(self) -> list[str]:
        """Formula strings that re-parse to a structurally equal spec."""
        return [render_formula(self.response, terms) for terms in self.parameter_formulas]

    def all_terms(self):
        for k, terms in enumerate(self.parameter_formulas):
            for term in terms:
                yield k, term


def build_spec(formulas, family, trunk_config=None) -> ModelSpec:
    """Parse and cross-validate one formula per distribution parameter.

    Parameters
    ----------
    formulas : list of str
        One formula per parameter of `family`, in parameter order.
    family : str
        Name of a registered distribution family.
    trunk_config : dict, optional
        Map trunk name -> architecture (list of hidden widths, or dict
        with 'units' and 'activation'). Every ``d(...)`` term must name
        a declared trunk.
    """
    from .distributions import get_family

    fam = get_family(family)
    if len(formulas) != fam.n_parameters:
        raise FormulaError(
            f"family '{fam.name}' has {fam.n_parameters} parameters "
            f"({', '.join(fam.parameter_names)}) but {len(formulas)} formulas were given"
        )
    trunk_config = trunk_config or {}
    trunks = {name: _normalize_trunk(name, cfg) for name, cfg in trunk_config.items()}

    response = None
    parsed = []
    for text in formulas:
        resp, terms = parse_model_formula(text)
        if response is None:
            response = resp
        elif resp != response:
            raise FormulaError(
                f"inconsistent response names: '{response}' vs '{resp}'"
            )
        for term in terms:
            if isinstance(term, Deep) and term.trunk not in trunks:
                raise FormulaError(
                    f"deep term references undeclared trunk '{term.trunk}'"
                )
        parsed.append(tuple(terms))

    used = {t.trunk for terms in parsed for t in terms if isinstance(t, Deep)}
    trunks = {name: spec for name, spec in trunks.items() if name in used}
    return ModelSpec(response, tuple(parsed), fam.name, trunks)
