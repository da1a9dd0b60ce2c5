"""Structural evaluation of generated programs.

Deterministic checks cover the issue taxonomy (syntax errors, hard-coded
answers, placeholders, example usage, wrong return type, null returns,
raw image processing); an LLM judge adds semantic feedback. Both feed the
refinement loop.
"""

from __future__ import annotations

import ast
import io
import operator
import re
import tokenize
from dataclasses import dataclass, field, fields
from typing import Any, Iterable, Sequence

from .core import (
    AnswerKind,
    AnswerSpec,
    AnswerValue,
    ProgramArtifact,
    ReasoningInstance,
    SymbolStore,
    TokenUsage,
    UnparseableAnswer,
    normalize_answer,
)
from .sandbox import RunOutcome, RunStatus

DEFAULT_MEDIA_DENY_LIST = ("cv2", "PIL")

# reporting precedence for one-category-per-program tallies
CATEGORY_PRECEDENCE = ("syntax", "placeholder", "type", "trivial")


@dataclass
class IssueSet:
    syntax_error: bool = False
    trivial: bool = False
    placeholder: bool = False
    example_usage: bool = False
    wrong_return_type: bool = False
    returns_null: bool = False
    raw_media_processing: bool = False
    messages: list[str] = field(default_factory=list)

    FLAGS = ("syntax_error", "trivial", "placeholder", "example_usage", "wrong_return_type",
             "returns_null", "raw_media_processing")

    def flags(self) -> dict[str, bool]:
        return {name: getattr(self, name) for name in self.FLAGS}

    def any(self) -> bool:
        return any(self.flags().values())

    @property
    def category(self) -> str | None:
        """Single reporting category: syntax > placeholder > type > trivial."""
        if self.syntax_error:
            return "syntax"
        if self.placeholder:
            return "placeholder"
        if self.wrong_return_type or self.returns_null:
            return "type"
        if self.trivial:
            return "trivial"
        return None

    def to_dict(self) -> dict:
        d: dict[str, Any] = self.flags()
        d["messages"] = list(self.messages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IssueSet":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass
class Feedback:
    issues: IssueSet
    run: RunOutcome
    judge_summary: str = ""
    symbol_issues: list[str] = field(default_factory=list)
    program_issues: list[str] = field(default_factory=list)

    def checker_output(self) -> str:
        """Text for the refinement prompt's checker slot: judge summary plus analyzer findings."""
        parts = []
        if self.judge_summary.strip():
            parts.append(self.judge_summary.strip())
        if self.issues.messages:
            parts.append("Automated checks:\n" + "\n".join(f"- {m}" for m in self.issues.messages))
        return "\n\n".join(parts) if parts else "No issues found."

    def to_dict(self, timing: bool = True) -> dict:
        return {
            "issues": self.issues.to_dict(),
            "run": self.run.to_dict(timing),
            "judge_summary": self.judge_summary,
            "symbol_issues": list(self.symbol_issues),
            "program_issues": list(self.program_issues),
        }


def _source(program: ProgramArtifact | str) -> str:
    return program.source if isinstance(program, ProgramArtifact) else program


def _parse(program: ProgramArtifact | str) -> ast.Module | None:
    try:
        return ast.parse(_source(program))
    except (SyntaxError, ValueError):
        return None


# ---------------------------------------------------------------------------
# syntax

def check_syntax(program: ProgramArtifact | str) -> tuple[int, str] | None:
    """First parser diagnostic as ``(line, message)``, or None if the source parses."""
    src = _source(program)
    try:
        tree = ast.parse(src)
    except SyntaxError as e:
        return (e.lineno or 1, e.msg)
    except ValueError as e:  # null bytes
        return (1, str(e))
    if not tree.body:
        return (1, "no entry definition")
    return None


# ---------------------------------------------------------------------------
# triviality: conservative constant propagation over `solve`

class _Inconclusive(Exception):
    pass


class _NonConst:
    def __repr__(self):
        return "NONCONST"


NONCONST = _NonConst()


@dataclass(frozen=True)
class _Const:
    value: Any

    def same(self, other: "_Const") -> bool:
        return type(self.value) is type(other.value) and _safe_eq(self.value, other.value)


def _safe_eq(a, b) -> bool:
    try:
        return bool(a == b)
    except Exception:
        return False


_IMMUTABLE = (int, float, complex, str, bytes, bool, type(None), range)
_DYNAMIC = {"eval", "exec", "globals", "locals", "vars", "setattr", "getattr", "delattr",
            "__import__", "compile"}
_PURE = {
    "abs": abs, "all": all, "any": any, "bool": bool, "chr": chr, "divmod": divmod, "float": float,
    "int": int, "len": len, "max": max, "min": min, "ord": ord, "round": round, "sorted": sorted,
    "str": str, "sum": sum, "tuple": tuple, "list": list, "set": set, "frozenset": frozenset,
    "hex": hex, "bin": bin, "oct": oct, "repr": repr, "format": format, "range": range,
}
_BINOPS = {
    ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv,
    ast.FloorDiv: operator.floordiv, ast.Mod: operator.mod, ast.Pow: operator.pow,
    ast.LShift: operator.lshift, ast.RShift: operator.rshift, ast.BitOr: operator.or_,
    ast.BitXor: operator.xor, ast.BitAnd: operator.and_, ast.MatMult: operator.matmul,
}
_UNOPS = {ast.UAdd: operator.pos, ast.USub: operator.neg, ast.Not: operator.not_, ast.Invert: operator.invert}
_CMPOPS = {
    ast.Eq: operator.eq, ast.NotEq: operator.ne, ast.Lt: operator.lt, ast.LtE: operator.le,
    ast.Gt: operator.gt, ast.GtE: operator.ge, ast.Is: operator.is_, ast.IsNot: operator.is_not,
    ast.In: lambda a, b: a in b, ast.NotIn: lambda a, b: a not in b,
}
_MAX_SIZE = 10_000


def _is_mutable(value: Any) -> bool:
    if isinstance(value, _IMMUTABLE):
        return False
    if isinstance(value, (tuple, frozenset)):
        return any(_is_mutable(v) for v in value)
    return True


def _too_big(value: Any) -> bool:
    if isinstance(value, (str, bytes)):
        return len(value) > 100 * _MAX_SIZE
    if isinstance(value, (list, tuple, set, frozenset, dict, range)):
        return len(value) > _MAX_SIZE
    if isinstance(value, int) and not isinstance(value, bool):
        return value.bit_length() > 4096
    return False


def _guarded_binop(op: type, a: Any, b: Any) -> Any:
    if op is ast.Pow and isinstance(b, (int, float)) and abs(b) > 1000:
        raise OverflowError
    if op is ast.LShift and isinstance(b, int) and b > 4096:
        raise OverflowError
    if op is ast.Mult:
        for x, y in ((a, b), (b, a)):
            if isinstance(x, (str, bytes, list, tuple)) and isinstance(y, int) and len(x) * y > _MAX_SIZE:
                raise OverflowError
    return _BINOPS[op](a, b)


class _ConstFolder:
    """Evaluates expressions to ``_Const`` when every input is a known literal."""

    def __init__(self, env: dict[str, Any], module_consts: dict[str, Any], shadowed: set[str]):
        self.env = env
        self.module_consts = module_consts
        self.shadowed = shadowed

    def lookup(self, name: str) -> Any:
        if name in self.env:
            return self.env[name]
        if name in self.module_consts:
            return self.module_consts[name]
        return NONCONST

    def eval(self, node: ast.AST | None) -> Any:
        if node is None:
            return _Const(None)
        try:
            result = self._eval(node)
        except _Inconclusive:
            raise
        except Exception:
            return NONCONST
        if isinstance(result, _Const) and _too_big(result.value):
            return NONCONST
        return result

    def _all(self, nodes: Iterable[ast.AST]) -> list[Any] | None:
        vals = []
        for n in nodes:
            v = self.eval(n)
            if v is NONCONST:
                return None
            vals.append(v.value)
        return vals

    def _eval(self, node: ast.AST) -> Any:
        if isinstance(node, ast.Constant):
            return _Const(node.value)
        if isinstance(node, ast.Name):
            return self.lookup(node.id)
        if isinstance(node, (ast.List, ast.Tuple, ast.Set)):
            if any(isinstance(e, ast.Starred) for e in node.elts):
                return NONCONST
            vals = self._all(node.elts)
            if vals is None:
                return NONCONST
            ctor = {ast.List: list, ast.Tuple: tuple, ast.Set: set}[type(node)]
            return _Const(ctor(vals))
        if isinstance(node, ast.Dict):
            if any(k is None for k in node.keys):
                return NONCONST
            keys = self._all(node.keys)
            vals = self._all(node.values)
            if keys is None or vals is None:
                return NONCONST
            return _Const(dict(zip(keys, vals)))
        if isinstance(node, ast.BinOp):
            a, b = self.eval(node.left), self.eval(node.right)
            if a is NONCONST or b is NONCONST:
                return NONCONST
            return _Const(_guarded_binop(type(node.op), a.value, b.value))
        if isinstance(node, ast.UnaryOp):
            a = self.eval(node.operand)
            return NONCONST if a is NONCONST else _Const(_UNOPS[type(node.op)](a.value))
        if isinstance(node, ast.BoolOp):
            is_and = isinstance(node.op, ast.And)
            for i, v in enumerate(node.values):
                c = self.eval(v)
                if c is NONCONST:
                    return NONCONST
                last = i == len(node.values) - 1
                if last or (is_and and not c.value) or (not is_and and c.value):
                    return c
        if isinstance(node, ast.Compare):
            left = self.eval(node.left)
            if left is NONCONST:
                return NONCONST
            cur = left.value
            for op, comp in zip(node.ops, node.comparators):
                right = self.eval(comp)
                if right is NONCONST:
                    return NONCONST
                if not _CMPOPS[type(op)](cur, right.value):
                    return _Const(False)
                cur = right.value
            return _Const(True)
        if isinstance(node, ast.IfExp):
            test = self.eval(node.test)
            if test is not NONCONST:
                return self.eval(node.body if test.value else node.orelse)
            a, b = self.eval(node.body), self.eval(node.orelse)
            if a is not NONCONST and b is not NONCONST and a.same(b):
                return a
            return NONCONST
        if isinstance(node, ast.Subscript):
            base, idx = self.eval(node.value), self.eval(node.slice)
            if base is NONCONST or idx is NONCONST:
                return NONCONST
            return _Const(base.value[idx.value])
        if isinstance(node, ast.Slice):
            parts = [self.eval(p) if p is not None else _Const(None) for p in (node.lower, node.upper, node.step)]
            if any(p is NONCONST for p in parts):
                return NONCONST
            return _Const(slice(*(p.value for p in parts)))
        if isinstance(node, ast.Call):
            if isinstance(node.func, ast.Name) and node.func.id in _DYNAMIC and node.func.id not in self.shadowed:
                raise _Inconclusive(node.func.id)
            if (isinstance(node.func, ast.Name) and node.func.id in _PURE
                    and node.func.id not in self.shadowed and not node.keywords
                    and not any(isinstance(a, ast.Starred) for a in node.args)):
                args = self._all(node.args)
                if args is None or any(isinstance(a, range) and len(a) > _MAX_SIZE for a in args):
                    return NONCONST
                return _Const(_PURE[node.func.id](*args))
            return NONCONST
        if isinstance(node, ast.JoinedStr):
            pieces = []
            for v in node.values:
                if isinstance(v, ast.Constant):
                    pieces.append(str(v.value))
                    continue
                c = self.eval(v.value)
                if c is NONCONST:
                    return NONCONST
                val = c.value
                if v.conversion == ord("r"):
                    val = repr(val)
                elif v.conversion == ord("s"):
                    val = str(val)
                elif v.conversion == ord("a"):
                    val = ascii(val)
                spec = ""
                if v.format_spec is not None:
                    s = self.eval(v.format_spec)
                    if s is NONCONST:
                        return NONCONST
                    spec = s.value
                pieces.append(format(val, spec))
            return _Const("".join(pieces))
        if isinstance(node, ast.NamedExpr):
            raise _Inconclusive("assignment expression")
        return NONCONST


def _names_in(node: ast.AST) -> set[str]:
    return {n.id for n in ast.walk(node) if isinstance(n, ast.Name)}


def _root_name(node: ast.AST) -> str | None:
    while isinstance(node, (ast.Attribute, ast.Subscript, ast.Starred)):
        node = node.value
    return node.id if isinstance(node, ast.Name) else None


def _escaping_names(node: ast.AST, shadowed: set[str]) -> set[str]:
    """Names whose objects may be mutated while evaluating ``node``."""
    out: set[str] = set()
    for n in ast.walk(node):
        if isinstance(n, ast.Call):
            pure = isinstance(n.func, ast.Name) and n.func.id in _PURE and n.func.id not in shadowed
            if isinstance(n.func, ast.Attribute):
                root = _root_name(n.func.value)
                if root:
                    out.add(root)
            if not pure:
                for a in list(n.args) + [k.value for k in n.keywords]:
                    out |= _names_in(a)
        elif isinstance(n, (ast.Lambda, ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            out |= _names_in(n)
    return out


def _assigned_names(stmts: Sequence[ast.stmt]) -> set[str]:
    out: set[str] = set()
    for s in stmts:
        for n in ast.walk(s):
            if isinstance(n, ast.Name) and isinstance(n.ctx, (ast.Store, ast.Del)):
                out.add(n.id)
            elif isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
                out.add(n.name)
            elif isinstance(n, (ast.Import, ast.ImportFrom)):
                for a in n.names:
                    out.add((a.asname or a.name).split(".")[0])
            elif isinstance(n, (ast.Attribute, ast.Subscript)) and isinstance(n.ctx, (ast.Store, ast.Del)):
                root = _root_name(n)
                if root:
                    out.add(root)
            elif isinstance(n, ast.Call) and isinstance(n.func, ast.Attribute):
                root = _root_name(n.func.value)
                if root:
                    out.add(root)
    return out


def _join(a: dict[str, Any] | None, b: dict[str, Any] | None) -> dict[str, Any] | None:
    if a is None:
        return b
    if b is None:
        return a
    out = {}
    for k in set(a) | set(b):
        va, vb = a.get(k, NONCONST), b.get(k, NONCONST)
        out[k] = va if (va is not NONCONST and vb is not NONCONST and va.same(vb)) else NONCONST
    return out


class _TrivialityAnalysis:
    def __init__(self, module_consts: dict[str, Any], shadowed: set[str]):
        self.module_consts = module_consts
        self.shadowed = shadowed
        # (value, control-dependent on non-constant data)
        self.returns: list[tuple[Any, bool]] = []

    def folder(self, env: dict[str, Any]) -> _ConstFolder:
        return _ConstFolder(env, self.module_consts, self.shadowed)

    def escape(self, node: ast.AST, env: dict[str, Any]) -> None:
        for name in _escaping_names(node, self.shadowed):
            val = env.get(name, self.module_consts.get(name, NONCONST))
            if val is not NONCONST and _is_mutable(val.value):
                env[name] = NONCONST

    def check_alias(self, value: ast.AST, env: dict[str, Any]) -> None:
        # binding a second name to a mutable object is aliasing we do not track
        candidates = [value]
        if isinstance(value, (ast.List, ast.Tuple, ast.Set)):
            candidates += value.elts
        elif isinstance(value, ast.Dict):
            candidates += [v for v in value.values if v is not None]
        for c in candidates:
            if isinstance(c, (ast.Name, ast.Subscript, ast.Attribute, ast.Starred)):
                name = _root_name(c)
                if name is None:
                    continue
                val = env.get(name, self.module_consts.get(name, NONCONST))
                if val is not NONCONST and _is_mutable(val.value):
                    raise _Inconclusive(f"alias of {name}")

    def bind(self, target: ast.AST, value: Any, env: dict[str, Any]) -> None:
        if isinstance(target, ast.Name):
            env[target.id] = value
        elif isinstance(target, (ast.Tuple, ast.List)):
            elts = target.elts
            seq = None
            if value is not NONCONST and not any(isinstance(e, ast.Starred) for e in elts):
                try:
                    seq = list(value.value)
                except TypeError:
                    seq = None
            if seq is not None and len(seq) == len(elts):
                for e, v in zip(elts, seq):
                    self.bind(e, _Const(v), env)
            else:
                for name in _assigned_names([ast.Expr(target)]) | {n.id for n in ast.walk(target) if isinstance(n, ast.Name)}:
                    env[name] = NONCONST
        else:
            root = _root_name(target)
            if root:
                env[root] = NONCONST

    def block(self, stmts: Sequence[ast.stmt], env: dict[str, Any], tainted: bool) -> tuple[dict | None, bool]:
        """Run ``stmts``; returns (env or None when every path left the block, taint)."""
        for stmt in stmts:
            env, tainted = self.stmt(stmt, env, tainted)
            if env is None:
                return None, tainted
        return env, tainted

    def stmt(self, s: ast.stmt, env: dict[str, Any], tainted: bool) -> tuple[dict | None, bool]:
        env = dict(env)
        fold = self.folder(env)
        if isinstance(s, (ast.Global, ast.Nonlocal)):
            raise _Inconclusive("global/nonlocal")
        if isinstance(s, ast.Return):
            self.escape(s.value, env) if s.value is not None else None
            self.returns.append((fold.eval(s.value), tainted))
            return None, tainted
        if isinstance(s, ast.Raise):
            return None, tainted
        if isinstance(s, (ast.Break, ast.Continue)):
            return None, tainted
        if isinstance(s, ast.Assign):
            self.check_alias(s.value, env)
            val = fold.eval(s.value)
            self.escape(s.value, env)
            for t in s.targets:
                self.bind(t, val, env)
            return env, tainted
        if isinstance(s, ast.AnnAssign):
            if s.value is not None:
                self.check_alias(s.value, env)
                val = fold.eval(s.value)
                self.escape(s.value, env)
                self.bind(s.target, val, env)
            return env, tainted
        if isinstance(s, ast.AugAssign):
            if isinstance(s.target, ast.Name):
                cur = fold.lookup(s.target.id)
                rhs = fold.eval(s.value)
                self.escape(s.value, env)
                if cur is NONCONST or rhs is NONCONST:
                    env[s.target.id] = NONCONST
                else:
                    try:
                        env[s.target.id] = _Const(_guarded_binop(type(s.op), cur.value, rhs.value))
                    except Exception:
                        env[s.target.id] = NONCONST
            else:
                self.escape(s.value, env)
                self.bind(s.target, NONCONST, env)
            return env, tainted
        if isinstance(s, ast.Expr):
            fold.eval(s.value)  # surfaces dynamic constructs
            self.escape(s.value, env)
            return env, tainted
        if isinstance(s, ast.If):
            test = fold.eval(s.test)
            self.escape(s.test, env)
            if test is not NONCONST:
                return self.block(s.body if test.value else s.orelse, env, tainted)
            a, _ = self.block(s.body, env, True)
            b, _ = self.block(s.orelse, env, True)
            joined = _join(a, b)
            # whatever follows is reached only on some data-dependent paths
            return joined, tainted or a is None or b is None
        if isinstance(s, (ast.For, ast.AsyncFor, ast.While)):
            loop_vars = _assigned_names(s.body)
            if isinstance(s, (ast.For, ast.AsyncFor)):
                it = fold.eval(s.iter)
                self.escape(s.iter, env)
                loop_vars |= _assigned_names([ast.Assign(targets=[s.target], value=ast.Constant(0))])
                guard_const = it is not NONCONST
            else:
                guard_const = False
            for name in loop_vars:
                env[name] = NONCONST
            if isinstance(s, ast.While):
                guard_const = self.folder(env).eval(s.test) is not NONCONST
            body_env, _ = self.block(s.body, env, tainted or not guard_const)
            after = _join(env, body_env) if body_env is not None else env
            if s.orelse:
                after, _ = self.block(s.orelse, after, True)
            loop_returns = any(isinstance(n, ast.Return) for n in ast.walk(s))
            return after, tainted or loop_returns
        if isinstance(s, (ast.With, ast.AsyncWith)):
            for item in s.items:
                self.escape(item.context_expr, env)
                if item.optional_vars is not None:
                    self.bind(item.optional_vars, NONCONST, env)
            return self.block(s.body, env, tainted)
        if isinstance(s, ast.Try) or type(s).__name__ == "TryStar":
            body_env, _ = self.block(s.body, env, tainted)
            handler_env = dict(env)
            for name in _assigned_names(s.body):
                handler_env[name] = NONCONST
            out = body_env
            if body_env is not None and s.orelse:
                out, _ = self.block(s.orelse, body_env, tainted)
            for h in s.handlers:
                henv = dict(handler_env)
                if h.name:
                    henv[h.name] = NONCONST
                res, _ = self.block(h.body, henv, True)
                out = _join(out, res)
            if s.finalbody:
                base = out if out is not None else handler_env
                fin, _ = self.block(s.finalbody, base, tainted)
                if out is None or fin is None:
                    return None, True
                out = fin
            return out, tainted or bool(s.handlers)
        if isinstance(s, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            self.escape(s, env)
            env[s.name] = NONCONST
            return env, tainted
        if isinstance(s, (ast.Import, ast.ImportFrom)):
            for a in s.names:
                env[(a.asname or a.name).split(".")[0]] = NONCONST
            return env, tainted
        if isinstance(s, ast.Delete):
            for t in s.targets:
                self.bind(t, NONCONST, env)
            return env, tainted
        if isinstance(s, ast.Assert):
            self.escape(s.test, env)
            return env, tainted
        if isinstance(s, ast.Pass):
            return env, tainted
        if type(s).__name__ == "Match":
            self.escape(s.subject, env)
            out = None
            for case in s.cases:
                cenv = dict(env)
                for n in ast.walk(case.pattern):
                    name = getattr(n, "name", None)
                    if isinstance(name, str):
                        cenv[name] = NONCONST
                res, _ = self.block(case.body, cenv, True)
                out = _join(out, res)
            # no case may match
            return _join(out, env), True
        raise _Inconclusive(type(s).__name__)


def _module_constants(tree: ast.Module) -> dict[str, Any]:
    counts: dict[str, int] = {}
    for s in tree.body:
        for name in _assigned_names([s]):
            counts[name] = counts.get(name, 0) + 1
    consts: dict[str, Any] = {}
    folder = _ConstFolder({}, consts, set())
    for s in tree.body:
        if isinstance(s, ast.Assign) and len(s.targets) == 1 and isinstance(s.targets[0], ast.Name):
            name = s.targets[0].id
            if counts.get(name) == 1:
                try:
                    val = folder.eval(s.value)
                except _Inconclusive:
                    val = NONCONST
                if val is not NONCONST:
                    consts[name] = val
    return consts


def find_entry(tree: ast.Module, name: str = "solve") -> ast.FunctionDef | None:
    found = None
    for s in tree.body:
        if isinstance(s, (ast.FunctionDef, ast.AsyncFunctionDef)) and s.name == name:
            found = s
    return found


def detect_trivial(program: ProgramArtifact | str) -> bool:
    """True iff every return of ``solve`` is a literal-derived constant independent of its input.

    Inconclusive analyses answer False.
    """
    tree = _parse(program)
    if tree is None:
        return False
    fn = find_entry(tree)
    if fn is None:
        return False
    module_consts = _module_constants(tree)
    params = [a.arg for a in fn.args.posonlyargs + fn.args.args + fn.args.kwonlyargs]
    if fn.args.vararg:
        params.append(fn.args.vararg.arg)
    if fn.args.kwarg:
        params.append(fn.args.kwarg.arg)
    module_names = set()
    for s in tree.body:
        module_names |= _assigned_names([s])
    shadowed = (module_names | _assigned_names(fn.body) | set(params)) & (set(_PURE) | _DYNAMIC)
    env: dict[str, Any] = {p: NONCONST for p in params}
    for name in module_names - set(module_consts):
        env[name] = NONCONST
    analysis = _TrivialityAnalysis(module_consts, shadowed)
    try:
        end_env, tainted = analysis.block(fn.body, env, False)
    except (_Inconclusive, RecursionError):
        return False
    if not analysis.returns:
        return False
    if end_env is not None:
        analysis.returns.append((_Const(None), tainted))
    values = [v for v, _ in analysis.returns]
    if any(v is NONCONST for v in values):
        return False
    first = values[0]
    if all(first.same(v) for v in values[1:]):
        return True
    return not any(t for _, t in analysis.returns)


# ---------------------------------------------------------------------------
# placeholders, example usage, raw media

_MARKER_RE = re.compile(r"\b(TODO|FIXME)\b", re.IGNORECASE)
_PLACEHOLDER_RE = re.compile(r"placeholder", re.IGNORECASE)


def _comments(src: str) -> list[str] | None:
    try:
        return [tok.string for tok in tokenize.generate_tokens(io.StringIO(src).readline)
                if tok.type == tokenize.COMMENT]
    except (tokenize.TokenError, IndentationError, SyntaxError):
        return None


def _docstrings(tree: ast.Module) -> list[str]:
    out = []
    for n in ast.walk(tree):
        if isinstance(n, ast.Expr) and isinstance(n.value, ast.Constant) and isinstance(n.value.value, str):
            out.append(n.value.value)
    return out


def _is_noop_body(body: list[ast.stmt]) -> bool:
    stmts = body
    if stmts and isinstance(stmts[0], ast.Expr) and isinstance(stmts[0].value, ast.Constant) \
            and isinstance(stmts[0].value.value, str):
        stmts = stmts[1:]
    if not stmts:
        return True
    if len(stmts) != 1:
        return False
    s = stmts[0]
    return isinstance(s, ast.Pass) or (
        isinstance(s, ast.Expr) and isinstance(s.value, ast.Constant) and s.value.value is Ellipsis
    )


def _placeholder_messages_tree(tree: ast.Module, src: str) -> list[str]:
    msgs = []
    comments = _comments(src) or []
    texts = comments + _docstrings(tree)
    if any(_MARKER_RE.search(t) for t in texts):
        msgs.append("contains a TODO/FIXME marker")
    if any(_PLACEHOLDER_RE.search(c) for c in comments):
        msgs.append("a comment mentions a placeholder")
    for n in ast.walk(tree):
        if isinstance(n, ast.Expr) and isinstance(n.value, ast.Constant) and n.value.value is Ellipsis:
            msgs.append(f"bare ellipsis statement on line {n.lineno}")
            break
    for n in ast.walk(tree):
        if isinstance(n, ast.Raise) and n.exc is not None:
            target = n.exc.func if isinstance(n.exc, ast.Call) else n.exc
            if isinstance(target, ast.Name) and target.id == "NotImplementedError":
                msgs.append(f"raises NotImplementedError on line {n.lineno}")
                break
    for n in ast.walk(tree):
        if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef)) and _is_noop_body(n.body):
            msgs.append(f"function `{n.name}` has an empty body")
    return msgs


_LINE_PATTERNS = [
    (re.compile(r"#.*\b(TODO|FIXME)\b", re.IGNORECASE), "contains a TODO/FIXME marker"),
    (re.compile(r"#.*placeholder", re.IGNORECASE), "a comment mentions a placeholder"),
    (re.compile(r"^\s*\.\.\.\s*(#.*)?$"), "bare ellipsis statement"),
    (re.compile(r"\braise\s+NotImplementedError\b"), "raises NotImplementedError"),
]


def _placeholder_messages_tokens(src: str) -> list[str]:
    msgs = []
    lines = src.splitlines()
    for pattern, msg in _LINE_PATTERNS:
        if any(pattern.search(line) for line in lines):
            msgs.append(msg)
    for i, line in enumerate(lines):
        if re.match(r"^\s*(async\s+)?def\s+\w+.*:\s*(#.*)?$", line):
            rest = [l for l in lines[i + 1:] if l.strip() and not l.strip().startswith("#")]
            indent = len(line) - len(line.lstrip())
            body = []
            for l in rest:
                if len(l) - len(l.lstrip()) <= indent:
                    break
                body.append(l.strip())
            if body in (["pass"], ["..."]):
                msgs.append("function has an empty body")
    return msgs


def detect_placeholders(program: ProgramArtifact | str) -> bool:
    return bool(_placeholder_messages(program))


def _placeholder_messages(program: ProgramArtifact | str) -> list[str]:
    src = _source(program)
    tree = _parse(program)
    if tree is None:
        return _placeholder_messages_tokens(src)
    return _placeholder_messages_tree(tree, src)


def _is_constant_expr(node: ast.AST) -> bool:
    if isinstance(node, ast.Constant):
        return True
    if isinstance(node, (ast.List, ast.Tuple, ast.Set)):
        return all(_is_constant_expr(e) for e in node.elts)
    if isinstance(node, ast.Dict):
        return all(k is not None and _is_constant_expr(k) for k in node.keys) and all(
            _is_constant_expr(v) for v in node.values)
    if isinstance(node, ast.UnaryOp):
        return _is_constant_expr(node.operand)
    if isinstance(node, ast.BinOp):
        return _is_constant_expr(node.left) and _is_constant_expr(node.right)
    return False


def _example_usage_statements(tree: ast.Module) -> list[ast.stmt]:
    bad = []
    for s in tree.body:
        if isinstance(s, (ast.Import, ast.ImportFrom, ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            continue
        if isinstance(s, ast.Assign) and all(isinstance(t, ast.Name) for t in s.targets) \
                and _is_constant_expr(s.value):
            continue
        if isinstance(s, ast.AnnAssign) and isinstance(s.target, ast.Name) and (
                s.value is None or _is_constant_expr(s.value)):
            continue
        if isinstance(s, ast.Expr) and isinstance(s.value, ast.Constant) and isinstance(s.value.value, str):
            continue
        bad.append(s)
    return bad


_TOP_CALL_RE = re.compile(r"^(if\s+__name__\b|print\s*\(|[A-Za-z_][\w.]*\s*\(|for\s|while\s)")


def detect_example_usage(program: ProgramArtifact | str) -> bool:
    """True iff some top-level statement is not an import, definition or constant assignment."""
    tree = _parse(program)
    if tree is None:
        return any(_TOP_CALL_RE.match(line) for line in _source(program).splitlines())
    return bool(_example_usage_statements(tree))


def _imported_modules(program: ProgramArtifact | str) -> set[str]:
    tree = _parse(program)
    mods: set[str] = set()
    if tree is None:
        for m in re.finditer(r"^\s*(?:from\s+([\w.]+)\s+import|import\s+([\w., ]+))", _source(program), re.M):
            names = m.group(1) or m.group(2)
            mods |= {n.strip().split(" ")[0].split(".")[0] for n in names.split(",") if n.strip()}
        return mods
    for n in ast.walk(tree):
        if isinstance(n, ast.Import):
            mods |= {a.name.split(".")[0] for a in n.names}
        elif isinstance(n, ast.ImportFrom) and n.module and n.level == 0:
            mods.add(n.module.split(".")[0])
        elif isinstance(n, ast.Call) and isinstance(n.func, ast.Name) and n.func.id == "__import__" \
                and n.args and isinstance(n.args[0], ast.Constant) and isinstance(n.args[0].value, str):
            mods.add(n.args[0].value.split(".")[0])
    return mods


def detect_raw_media(program: ProgramArtifact | str, deny_list: Sequence[str] = DEFAULT_MEDIA_DENY_LIST) -> bool:
    return bool(_imported_modules(program) & set(deny_list))


# ---------------------------------------------------------------------------
# execution-result checks

def _is_scalar(value: Any) -> bool:
    return value is None or isinstance(value, (str, int, float, bool))


def null_admitted(gold: AnswerValue | None) -> bool:
    return gold is not None and gold.canonical_text in ("none", "null")


def check_return(run: RunOutcome, spec: AnswerSpec, gold: AnswerValue | None = None) -> tuple[bool, bool]:
    """(wrong_return_type, returns_null) for a successful run.

    ``gold`` is only consulted for the null carve-out ("None" is the correct
    answer); the synthesis loop never passes it.
    """
    if run.status is not RunStatus.OK:
        return (False, False)
    value = run.return_value
    if value is None:
        return (False, not null_admitted(gold))
    if not _is_scalar(value):
        return (True, False)
    try:
        normalized = normalize_answer(value, spec)
    except UnparseableAnswer:
        return (True, False)
    if spec.kind is AnswerKind.MULTIPLE_CHOICE:
        labels = {label for label, _ in spec.option_table()}
        return (normalized.canonical_text not in labels, False)
    if spec.kind is AnswerKind.BOOLEAN:
        return (not isinstance(normalized.value, bool), False)
    return (False, False)


def analyze(
    program: ProgramArtifact | str,
    run: RunOutcome | None,
    spec: AnswerSpec,
    gold: AnswerValue | None = None,
    media_deny_list: Sequence[str] = DEFAULT_MEDIA_DENY_LIST,
) -> IssueSet:
    """All deterministic checks. ``run=None`` skips the execution-result checks."""
    issues = IssueSet()
    diag = check_syntax(program)
    if diag is not None:
        issues.syntax_error = True
        issues.messages.append(f"syntax error on line {diag[0]}: {diag[1]}")
    else:
        issues.trivial = detect_trivial(program)
        if issues.trivial:
            issues.messages.append("`solve` returns a hard-coded value that does not depend on `symbols`")
    placeholder_msgs = _placeholder_messages(program)
    if placeholder_msgs:
        issues.placeholder = True
        issues.messages.extend(f"placeholder: {m}" for m in placeholder_msgs)
    if detect_example_usage(program):
        issues.example_usage = True
        issues.messages.append("top-level code other than imports, definitions and constants (example usage)")
    if detect_raw_media(program, media_deny_list):
        issues.raw_media_processing = True
        issues.messages.append("imports an image-processing library instead of using the extracted symbols")
    if run is not None:
        if run.status is RunStatus.OK:
            wrong_type, null = check_return(run, spec, gold)
            if wrong_type:
                issues.wrong_return_type = True
                issues.messages.append(
                    f"return value {run.return_value!r} does not match the expected {spec.kind.value} answer")
            if null:
                issues.returns_null = True
                issues.messages.append("`solve` returned None")
        elif run.status is RunStatus.TIMEOUT:
            issues.messages.append(f"execution timed out: {run.exception_text}")
        else:
            last = run.exception_text.strip().splitlines()[-1:] or [run.status.value]
            issues.messages.append(f"execution failed ({run.status.value}): {last[0]}")
    return issues


def is_well_formed(issues: IssueSet, run: RunOutcome | None) -> bool:
    if run is None or run.status is not RunStatus.OK or not _is_scalar(run.return_value):
        return False
    return not (issues.syntax_error or issues.placeholder or issues.wrong_return_type or issues.returns_null)


def is_non_trivial(issues: IssueSet, run: RunOutcome | None) -> bool:
    return is_well_formed(issues, run) and not issues.trivial


# ---------------------------------------------------------------------------
# LLM judge

def run_slots(run: RunOutcome) -> dict[str, str]:
    return {
        "output": repr(run.return_value) if run.status is RunStatus.OK else "None",
        "stdout": run.stdout,
        "err": run.exception_text,
    }


_NO_ISSUE_RE = re.compile(
    r"^(none|n/?a|nothing|no (significant |major |obvious |other |further |additional )?"
    r"(issues?|problems?|bugs?|concerns?)\b.*|there are no (significant |major |obvious )?(issues?|problems?)\b.*|"
    r"(the )?code (looks|is) correct.*|everything (looks|is) (correct|fine|good).*)$",
    re.IGNORECASE,
)
_BULLET_RE = re.compile(r"^\s*(?:[-*•+]|\d+[.)])\s+")
_MD_DECOR_RE = re.compile(r"[*_#`]+")


def _heading_kind(line: str) -> str | None:
    plain = _MD_DECOR_RE.sub("", line).strip()
    if not plain:
        return None
    is_heading = line.lstrip().startswith("#") or plain.endswith(":") or (
        line.strip().startswith("**") and line.strip().endswith("**"))
    if not is_heading or len(plain) > 80:
        return None
    low = plain.lower()
    if "symbol" in low:
        return "symbol"
    if any(w in low for w in ("code", "program", "issue", "problem", "bug", "summary")):
        return "program"
    return None


def split_judge_findings(text: str) -> tuple[list[str], list[str]]:
    """Split judge output into (symbol_issues, program_issues).

    Findings under a heading that mentions symbols are symbol issues;
    everything else, including text with no headings, is a program issue.
    "No issues" statements are dropped.
    """
    symbol: list[str] = []
    program: list[str] = []
    section = "program"
    current: list[str] | None = None
    for raw in text.splitlines():
        line = raw.rstrip()
        if not line.strip() or set(line.strip()) <= set("`-=*"):
            current = None
            continue
        kind = _heading_kind(line)
        if kind is not None:
            section = kind
            current = None
            inline = _MD_DECOR_RE.sub("", line).split(":", 1)
            tail = inline[1].strip() if len(inline) == 2 else ""
            if tail:
                (symbol if section == "symbol" else program).append(tail)
            continue
        bullet = _BULLET_RE.match(line)
        item = _MD_DECOR_RE.sub("", line[bullet.end():] if bullet else line).strip()
        target = symbol if section == "symbol" else program
        if bullet or current is None:
            target.append(item)
            current = target
        else:
            current[-1] = f"{current[-1]} {item}"
    clean = lambda items: [i for i in items if i and not _NO_ISSUE_RE.match(i.rstrip(". "))]
    return clean(symbol), clean(program)


@dataclass
class JudgeResult:
    summary: str
    symbol_issues: list[str]
    program_issues: list[str]
    usage: TokenUsage


def render_judge_prompt(symbols: SymbolStore, program: ProgramArtifact, run: RunOutcome) -> str:
    from .prompts import render_judge

    return render_judge(json_str=symbols.pretty(), code_str=program.source, **run_slots(run))


def judge(instance: ReasoningInstance, symbols: SymbolStore, program: ProgramArtifact, run: RunOutcome,
          provider, model_id: str, temperature: float = 0.0) -> JudgeResult:
    from .prompts import build_request, judge_messages

    prompt = render_judge_prompt(symbols, program, run)
    response = provider.complete(build_request(model_id, judge_messages(instance, prompt), temperature))
    symbol_issues, program_issues = split_judge_findings(response.text)
    return JudgeResult(response.text, symbol_issues, program_issues, response.usage)
