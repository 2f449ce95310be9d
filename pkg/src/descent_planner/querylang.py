"""Parser for the declarative training language.

Three statement forms, each terminated by a semicolon:

    [name =] RUN <task> ON <path>[:col[,path:lo-hi]]
             [, HAVING time 1h30m, epsilon 0.01, max_iter 1000]
             [, USING algorithm sgd, convergence l2, step 1, sampler shuffled-partition];
    PERSIST <name> ON <path>;
    [name =] PREDICT ON <path> WITH <model-path>;

Keywords are case-insensitive; clauses are optional and order-independent
within HAVING/USING. Parse errors never raise bare exceptions: they carry the
byte offset and the token set that would have been accepted there.
"""

from __future__ import annotations

import difflib
import re
from dataclasses import dataclass, field
from typing import Optional

from . import plans, sampling
from .dataset import ColumnSpec
from .errors import DescentPlannerError
from .operators import _GRADIENT_ALIASES, CONVERGENCE_REGISTRY, GRADIENT_REGISTRY
from .optimizer import Constraints


class ParseError(DescentPlannerError):
    def __init__(self, message, offset, expected=()):
        detail = f"at byte {offset}: {message}"
        if expected:
            detail += f" (expected {', '.join(sorted(expected))})"
        super().__init__(detail)
        self.offset = offset
        self.expected = tuple(sorted(expected))


class ValidationError(DescentPlannerError):
    def __init__(self, message, suggestions=()):
        if suggestions:
            message += f"; known: {', '.join(suggestions)}"
        super().__init__(message)
        self.suggestions = tuple(suggestions)


# --- lexer -------------------------------------------------------------------

_PUNCT = {",": "COMMA", ";": "SEMI", ":": "COLON", "=": "EQUALS",
          "(": "LPAREN", ")": "RPAREN"}
_WORD_RE = re.compile(r"[A-Za-z0-9_./+\-\\]+")


@dataclass(frozen=True)
class Token:
    kind: str
    value: str
    offset: int


def tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        ch = text[pos]
        if ch.isspace():
            pos += 1
            continue
        if ch in _PUNCT:
            tokens.append(Token(_PUNCT[ch], ch, pos))
            pos += 1
            continue
        m = _WORD_RE.match(text, pos)
        if not m:
            raise ParseError(f"unexpected character {ch!r}", pos)
        tokens.append(Token("WORD", m.group(), pos))
        pos = m.end()
    tokens.append(Token("EOF", "", len(text)))
    return tokens


# --- AST ---------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetRef:
    path: str
    column: Optional[int] = None
    column_range: Optional[tuple] = None


@dataclass(frozen=True)
class HavingClause:
    time_seconds: Optional[int] = None
    epsilon: Optional[float] = None
    max_iter: Optional[int] = None


@dataclass(frozen=True)
class UsingClause:
    algorithm: Optional[str] = None
    algorithm_arg: Optional[float] = None
    convergence: Optional[str] = None
    step: Optional[float] = None
    sampler: Optional[str] = None


@dataclass(frozen=True)
class RunQuery:
    task: str
    refs: tuple
    having: HavingClause = HavingClause()
    using: UsingClause = UsingClause()
    binding: Optional[str] = None


@dataclass(frozen=True)
class PersistStmt:
    query_name: str
    path: str


@dataclass(frozen=True)
class PredictStmt:
    test_path: str
    model_path: str
    binding: Optional[str] = None


_DURATION_RE = re.compile(r"(?:(\d+)h)?(?:(\d+)m)?(?:(\d+)s)?")


def parse_duration(text: str, offset: int = 0) -> int:
    m = _DURATION_RE.fullmatch(text)
    if not m or not any(m.groups()):
        raise ParseError(f"malformed duration {text!r}", offset,
                         expected=("duration like 1h30m",))
    h, mnt, s = (int(g) if g else 0 for g in m.groups())
    return h * 3600 + mnt * 60 + s


def format_duration(seconds: int) -> str:
    h, rem = divmod(int(seconds), 3600)
    m, s = divmod(rem, 60)
    out = "".join(f"{v}{u}" for v, u in ((h, "h"), (m, "m"), (s, "s")) if v)
    return out or "0s"


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.pos = 0

    # -- token plumbing
    def peek(self, ahead=0) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def next(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def fail(self, message, expected=()):
        raise ParseError(message, self.peek().offset, expected)

    def expect(self, kind, expected_desc=None):
        tok = self.peek()
        if tok.kind != kind:
            self.fail(f"found {tok.value or 'end of input'!r}",
                      expected=(expected_desc or kind.lower(),))
        return self.next()

    def keyword_is(self, *names, ahead=0) -> bool:
        tok = self.peek(ahead)
        return tok.kind == "WORD" and tok.value.lower() in names

    def expect_keyword(self, name):
        if not self.keyword_is(name):
            self.fail(f"found {self.peek().value or 'end of input'!r}",
                      expected=(name.upper(),))
        return self.next()

    def word(self, desc) -> Token:
        return self.expect("WORD", desc)

    # -- numbers
    def number(self, desc) -> float:
        tok = self.word(desc)
        try:
            return float(tok.value)
        except ValueError:
            raise ParseError(f"malformed number {tok.value!r}", tok.offset,
                             expected=(desc,)) from None

    def integer(self, desc) -> int:
        tok = self.word(desc)
        try:
            return int(tok.value)
        except ValueError:
            raise ParseError(f"malformed integer {tok.value!r}", tok.offset,
                             expected=(desc,)) from None

    # -- grammar
    def parse_program(self):
        stmts = []
        while self.peek().kind != "EOF":
            stmts.append(self.parse_statement())
        if not stmts:
            self.fail("empty query", expected=("RUN", "PERSIST", "PREDICT"))
        return stmts

    def parse_statement(self):
        binding = None
        if self.peek().kind == "WORD" and self.peek(1).kind == "EQUALS" \
                and not self.keyword_is("run", "persist", "predict"):
            binding = self.next().value
            self.next()  # '='
        if self.keyword_is("run"):
            stmt = self.parse_run(binding)
        elif self.keyword_is("predict"):
            stmt = self.parse_predict(binding)
        elif self.keyword_is("persist"):
            if binding is not None:
                self.fail("PERSIST takes no binding")
            stmt = self.parse_persist()
        else:
            self.fail(f"found {self.peek().value or 'end of input'!r}",
                      expected=("RUN", "PERSIST", "PREDICT"))
        self.expect("SEMI", "';'")
        return stmt

    def parse_run(self, binding):
        self.expect_keyword("run")
        task = self.word("task or gradient name").value
        self.expect_keyword("on")
        refs = [self.parse_dsref()]
        having = using = None
        while self.peek().kind == "COMMA":
            if self.keyword_is("having", ahead=1) or self.keyword_is("using", ahead=1):
                self.next()
                continue
            self.next()
            refs.append(self.parse_dsref())
        while self.keyword_is("having") or self.keyword_is("using"):
            if self.keyword_is("having"):
                if having is not None:
                    self.fail("duplicate HAVING clause")
                having = self.parse_having()
            else:
                if using is not None:
                    self.fail("duplicate USING clause")
                using = self.parse_using()
            if self.peek().kind == "COMMA" and (
                    self.keyword_is("having", ahead=1)
                    or self.keyword_is("using", ahead=1)):
                self.next()
        return RunQuery(task=task, refs=tuple(refs),
                        having=having or HavingClause(),
                        using=using or UsingClause(), binding=binding)

    def parse_dsref(self):
        path = self.word("dataset path").value
        if self.peek().kind != "COLON":
            return DatasetRef(path)
        self.next()
        tok = self.word("column or range like 4-20")
        m = re.fullmatch(r"(\d+)-(\d+)", tok.value)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if lo < 1 or hi < lo:
                raise ParseError(f"bad column range {tok.value!r}", tok.offset)
            return DatasetRef(path, column_range=(lo, hi))
        if tok.value.isdigit():
            col = int(tok.value)
            if col < 1:
                raise ParseError("columns are 1-based", tok.offset)
            return DatasetRef(path, column=col)
        raise ParseError(f"bad column spec {tok.value!r}", tok.offset,
                         expected=("column index", "range like 4-20"))

    def parse_having(self):
        self.expect_keyword("having")
        fields = {}
        seen = set()
        while True:
            tok = self.word("HAVING key")
            key = tok.value.lower()
            if key in seen:
                raise ParseError(f"duplicate HAVING key {key!r}", tok.offset)
            seen.add(key)
            if key == "time":
                val = self.word("duration like 1h30m")
                fields["time_seconds"] = parse_duration(val.value, val.offset)
            elif key == "epsilon":
                fields["epsilon"] = self.number("tolerance value")
            elif key == "max_iter":
                fields["max_iter"] = self.integer("iteration count")
            else:
                raise ParseError(f"unknown HAVING key {key!r}", tok.offset,
                                 expected=("time", "epsilon", "max_iter"))
            if self.peek().kind == "COMMA" and self.peek(1).kind == "WORD" \
                    and self.peek(1).value.lower() in ("time", "epsilon", "max_iter"):
                self.next()
                continue
            break
        return HavingClause(**fields)

    _USING_KEYS = ("algorithm", "convergence", "step", "sampler")

    def parse_using(self):
        self.expect_keyword("using")
        fields = {}
        while True:
            tok = self.word("USING key")
            key = tok.value.lower()
            if key in fields:
                raise ParseError(f"duplicate USING key {key!r}", tok.offset)
            if key == "step":
                fields["step"] = self.number("step size")
            elif key in ("algorithm", "convergence", "sampler"):
                name = self.word(f"{key} name").value
                arg = None
                if self.peek().kind == "LPAREN":
                    self.next()
                    if self.peek().kind == "WORD":
                        arg = self.number(f"{key} argument")
                    self.expect("RPAREN", "')'")
                fields[key] = name.lower()
                if key == "algorithm":
                    fields["algorithm_arg"] = arg
            else:
                raise ParseError(f"unknown USING key {key!r}", tok.offset,
                                 expected=self._USING_KEYS)
            if self.peek().kind == "COMMA" and self.peek(1).kind == "WORD" \
                    and self.peek(1).value.lower() in self._USING_KEYS:
                self.next()
                continue
            break
        return UsingClause(**fields)

    def parse_persist(self):
        self.expect_keyword("persist")
        name = self.word("query name").value
        self.expect_keyword("on")
        path = self.word("model path").value
        return PersistStmt(name, path)

    def parse_predict(self, binding):
        self.expect_keyword("predict")
        self.expect_keyword("on")
        test = self.word("test dataset path").value
        self.expect_keyword("with")
        model = self.word("model path").value
        return PredictStmt(test, model, binding=binding)


def parse(text: str):
    """Parse a query program into a list of statements."""
    return _Parser(text).parse_program()


def parse_single(text: str):
    stmts = parse(text)
    if len(stmts) != 1:
        raise ParseError("expected exactly one statement",
                         offset=0 if not stmts else len(text))
    return stmts[0]


# --- pretty printing ------------------------------------------------------------


def pretty(stmt) -> str:
    if isinstance(stmt, PersistStmt):
        return f"PERSIST {stmt.query_name} ON {stmt.path};"
    if isinstance(stmt, PredictStmt):
        head = f"{stmt.binding} = " if stmt.binding else ""
        return f"{head}PREDICT ON {stmt.test_path} WITH {stmt.model_path};"
    head = f"{stmt.binding} = " if stmt.binding else ""
    refs = []
    for ref in stmt.refs:
        if ref.column is not None:
            refs.append(f"{ref.path}:{ref.column}")
        elif ref.column_range is not None:
            refs.append(f"{ref.path}:{ref.column_range[0]}-{ref.column_range[1]}")
        else:
            refs.append(ref.path)
    out = f"{head}RUN {stmt.task} ON {', '.join(refs)}"
    having = []
    if stmt.having.time_seconds is not None:
        having.append(f"time {format_duration(stmt.having.time_seconds)}")
    if stmt.having.epsilon is not None:
        having.append(f"epsilon {stmt.having.epsilon:g}")
    if stmt.having.max_iter is not None:
        having.append(f"max_iter {stmt.having.max_iter}")
    if having:
        out += ", HAVING " + ", ".join(having)
    using = []
    if stmt.using.algorithm is not None:
        arg = stmt.using.algorithm_arg
        suffix = f"({arg:g})" if arg is not None else ""
        using.append(f"algorithm {stmt.using.algorithm}{suffix}")
    if stmt.using.convergence is not None:
        using.append(f"convergence {stmt.using.convergence}()")
    if stmt.using.step is not None:
        using.append(f"step {stmt.using.step:g}")
    if stmt.using.sampler is not None:
        using.append(f"sampler {stmt.using.sampler}()")
    if using:
        out += ", USING " + ", ".join(using)
    return out + ";"


# --- validation -------------------------------------------------------------------

TASK_GRADIENTS = {
    "classification": "svm-hinge",
    "regression": "linear-regression",
    "logistic": "logistic-regression",
}

_ALGORITHM_ALIASES = {
    "bgd": "bgd", "sgd": "sgd", "mgd": "mgd", "svrg": "svrg",
    "bgd-linesearch": "bgd-linesearch", "linesearch": "bgd-linesearch",
}

DEFAULT_EPSILON = 1e-3
DEFAULT_MAX_ITER = 1000
DEFAULT_STEP = 1.0


@dataclass(frozen=True)
class NormalizedQuery:
    task: str
    gradient_name: str
    path: str
    columns: Optional[ColumnSpec]
    hyper: plans.HyperParams
    constraints: Constraints
    pinned_algorithm: Optional[plans.GDAlgorithm] = None
    pinned_sampler: Optional[sampling.SamplingStrategy] = None
    epsilon_given: bool = False
    max_iter_given: bool = False
    binding: Optional[str] = None

    @property
    def prediction_task(self) -> str:
        return "regression" if self.task == "regression" else "classification"

    @property
    def skip_speculation(self) -> bool:
        return self.max_iter_given and not self.epsilon_given


def _suggest(name, known):
    close = difflib.get_close_matches(name, known, n=3)
    return tuple(close) if close else tuple(sorted(known))


def _resolve_columns(refs):
    if len(refs) == 1:
        ref = refs[0]
        if ref.column is None and ref.column_range is None:
            return ref.path, None
        raise ValidationError(
            "a single dataset reference cannot carry a column spec; give a "
            "label column and a feature range, e.g. data.txt:2, data.txt:4-20")
    if len(refs) == 2:
        a, b = refs
        if a.path != b.path:
            raise ValidationError(
                f"dataset references must share one path, got {a.path!r} "
                f"and {b.path!r}")
        single = a if a.column is not None else b
        ranged = b if b.column_range is not None else a
        if single.column is None or ranged.column_range is None:
            raise ValidationError(
                "expected one label column and one feature range")
        lo, hi = ranged.column_range
        return a.path, ColumnSpec(single.column, lo, hi)
    raise ValidationError("a RUN query takes one or two dataset references")


def validate(query: RunQuery, extra_samplers=(), extra_convergence=()) -> NormalizedQuery:
    """Resolve names against the registries and inject defaults."""
    task = query.task.lower()
    if task in TASK_GRADIENTS:
        gradient_name = TASK_GRADIENTS[task]
    else:
        key = _GRADIENT_ALIASES.get(task, task)
        if key not in GRADIENT_REGISTRY:
            known = sorted(TASK_GRADIENTS) + sorted(GRADIENT_REGISTRY)
            raise ValidationError(f"unknown task or gradient {query.task!r}",
                                  _suggest(task, known))
        gradient_name = key
        task = "regression" if key == "linear-regression" else "classification"

    path, columns = _resolve_columns(query.refs)

    having = query.having
    if having.epsilon is not None and having.epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    if having.max_iter is not None and having.max_iter < 1:
        raise ValidationError("max_iter must be at least 1")

    epsilon_given = having.epsilon is not None
    max_iter_given = having.max_iter is not None
    epsilon = having.epsilon if epsilon_given else DEFAULT_EPSILON
    max_iter = having.max_iter if max_iter_given else DEFAULT_MAX_ITER
    tolerance = None if (max_iter_given and not epsilon_given) else epsilon

    using = query.using
    step = using.step if using.step is not None else DEFAULT_STEP
    convergence = "l2"
    if using.convergence is not None:
        known = tuple(CONVERGENCE_REGISTRY) + tuple(extra_convergence)
        if using.convergence not in known:
            raise ValidationError(
                f"unknown convergence function {using.convergence!r}",
                _suggest(using.convergence, known))
        if using.convergence in CONVERGENCE_REGISTRY:
            convergence = using.convergence

    pinned_algorithm = None
    if using.algorithm is not None:
        name = _ALGORITHM_ALIASES.get(using.algorithm)
        if name is None:
            raise ValidationError(f"unknown algorithm {using.algorithm!r}",
                                  _suggest(using.algorithm,
                                           sorted(_ALGORITHM_ALIASES)))
        arg = using.algorithm_arg
        if name == "mgd":
            pinned_algorithm = plans.MiniBatchGD(
                int(arg) if arg else plans.DEFAULT_MGD_BATCH)
        elif name == "svrg":
            pinned_algorithm = plans.SVRG(
                int(arg) if arg else plans.DEFAULT_SVRG_FREQUENCY)
        elif name == "bgd":
            pinned_algorithm = plans.BatchGD()
        elif name == "sgd":
            pinned_algorithm = plans.StochasticGD()
        else:
            pinned_algorithm = plans.LineSearchGD()

    pinned_sampler = None
    if using.sampler is not None:
        known = sampling.STRATEGY_NAMES + tuple(extra_samplers)
        if using.sampler not in known:
            raise ValidationError(f"unknown sampler {using.sampler!r}",
                                  _suggest(using.sampler, known))
        if using.sampler in sampling.STRATEGY_NAMES:
            pinned_sampler = sampling.strategy_from_name(using.sampler)

    hyper = plans.HyperParams(step_beta=step, tolerance=tolerance,
                              max_iter=max_iter, convergence=convergence)
    constraints = Constraints(time_seconds=having.time_seconds)
    return NormalizedQuery(
        task=task, gradient_name=gradient_name, path=path, columns=columns,
        hyper=hyper, constraints=constraints,
        pinned_algorithm=pinned_algorithm, pinned_sampler=pinned_sampler,
        epsilon_given=epsilon_given, max_iter_given=max_iter_given,
        binding=query.binding)
