"""Sandboxed interpreter for adaptation programs.

Programs are written in a restricted Python-syntax dialect and run against the
host handle API only: no imports, no attribute access outside host-object
method calls, no libraries beyond a tiny built-in set. Every evaluated node
charges the execution's step budget, so a runaway program is cut off and the
message proceeds unmodified.

A program defines `on_request(h)` and/or `on_response(h)`; the binding's
trigger selects the entry point. `h` is the triggering message's handle.
Binding params and top-level constant assignments are visible as globals.
"""

from __future__ import annotations

import ast
from typing import Any, Optional

from ..errors import BudgetExceeded, ProgramError
from .host import ExecutionContext, HeadersView, JsonView, MessageHandle, QueueHandle, TriggerHandle

_ALLOWED_NODES = (
    ast.Module,
    ast.FunctionDef,
    ast.arguments,
    ast.arg,
    ast.Return,
    ast.Assign,
    ast.AugAssign,
    ast.Expr,
    ast.If,
    ast.For,
    ast.While,
    ast.Break,
    ast.Continue,
    ast.Pass,
    ast.BoolOp,
    ast.And,
    ast.Or,
    ast.BinOp,
    ast.UnaryOp,
    ast.Compare,
    ast.Call,
    ast.keyword,
    ast.Attribute,
    ast.Subscript,
    ast.Name,
    ast.Constant,
    ast.List,
    ast.Tuple,
    ast.Dict,
    ast.IfExp,
    ast.Load,
    ast.Store,
    ast.Add,
    ast.Sub,
    ast.Mult,
    ast.Div,
    ast.FloorDiv,
    ast.Mod,
    ast.USub,
    ast.UAdd,
    ast.Not,
    ast.Eq,
    ast.NotEq,
    ast.Lt,
    ast.LtE,
    ast.Gt,
    ast.GtE,
    ast.In,
    ast.NotIn,
    ast.Is,
    ast.IsNot,
)

_SAFE_BUILTINS: dict[str, Any] = {
    "len": len,
    "str": str,
    "int": int,
    "float": float,
    "abs": abs,
    "min": min,
    "max": max,
    "round": round,
    "bool": bool,
    "range": range,
    "sorted": sorted,
    "True": True,
    "False": False,
    "None": None,
}

_STR_METHODS = {
    "split", "rsplit", "find", "startswith", "endswith", "lower", "upper",
    "strip", "lstrip", "rstrip", "replace", "count", "join", "isdigit",
}
_LIST_METHODS = {"append", "index", "count"}
_DICT_METHODS = {"get", "keys", "values", "items"}

_HOST_TYPES = (TriggerHandle, MessageHandle, QueueHandle, HeadersView, JsonView)


class _Return(Exception):
    def __init__(self, value: Any) -> None:
        self.value = value


class _Break(Exception):
    pass


class _Continue(Exception):
    pass


class SandboxedProgram:
    """A parsed, validated adaptation program."""

    def __init__(self, source: str, name: str = "<program>") -> None:
        self.name = name
        self.source = source
        try:
            tree = ast.parse(source, filename=name)
        except SyntaxError as exc:
            raise ProgramError(f"{name}: syntax error: {exc}") from exc
        self._validate(tree)
        self.functions: dict[str, ast.FunctionDef] = {}
        self.constants: dict[str, Any] = {}
        for node in tree.body:
            if isinstance(node, ast.FunctionDef):
                self.functions[node.name] = node
            elif isinstance(node, ast.Assign):
                self._load_constant(node)
            elif isinstance(node, ast.Expr) and isinstance(node.value, ast.Constant):
                continue  # docstring
            else:
                raise ProgramError(f"{name}: only functions and constant assignments at top level")
        self.uses_transform = self._calls_method(tree, "transform")
        self.uses_notify = self._calls_method(tree, "notify")

    def entry_points(self) -> set[str]:
        return set(self.functions)

    def _validate(self, tree: ast.AST) -> None:
        for node in ast.walk(tree):
            if not isinstance(node, _ALLOWED_NODES):
                raise ProgramError(
                    f"{self.name}: construct {type(node).__name__} is not available to programs"
                )
            if isinstance(node, ast.FunctionDef) and (
                node.args.posonlyargs or node.args.kwonlyargs or node.args.vararg
                or node.args.kwarg or node.args.defaults or node.decorator_list
            ):
                raise ProgramError(f"{self.name}: only plain positional parameters are supported")
            if isinstance(node, ast.Attribute) and node.attr.startswith("_"):
                raise ProgramError(f"{self.name}: private attribute access is not allowed")

    def _load_constant(self, node: ast.Assign) -> None:
        if len(node.targets) != 1 or not isinstance(node.targets[0], ast.Name):
            raise ProgramError(f"{self.name}: top-level assignments must bind a single name")
        try:
            value = ast.literal_eval(node.value)
        except (ValueError, SyntaxError) as exc:
            raise ProgramError(f"{self.name}: top-level values must be literals") from exc
        self.constants[node.targets[0].id] = value

    @staticmethod
    def _calls_method(tree: ast.AST, method: str) -> bool:
        for node in ast.walk(tree):
            if isinstance(node, ast.Call) and isinstance(node.func, ast.Attribute):
                if node.func.attr == method:
                    return True
        return False

    # -- execution -------------------------------------------------------------

    def run(self, entry: str, handle: TriggerHandle, params: dict, ctx: ExecutionContext) -> Any:
        fn = self.functions.get(entry)
        if fn is None:
            raise ProgramError(f"{self.name}: no {entry} entry point")
        env = dict(_SAFE_BUILTINS)
        env.update(self.constants)
        env.update(params or {})
        evaluator = _Evaluator(self, ctx, env)
        return evaluator.call_function(fn, [handle])


class _Evaluator:
    __slots__ = ("program", "ctx", "globals")

    def __init__(self, program: SandboxedProgram, ctx: ExecutionContext, globals_env: dict) -> None:
        self.program = program
        self.ctx = ctx
        self.globals = globals_env

    def call_function(self, fn: ast.FunctionDef, args: list) -> Any:
        if len(fn.args.args) != len(args):
            raise ProgramError(f"{fn.name} expects {len(fn.args.args)} arguments, got {len(args)}")
        frame = dict(zip((a.arg for a in fn.args.args), args))
        try:
            self.exec_block(fn.body, frame)
        except _Return as ret:
            return ret.value
        return None

    def exec_block(self, body: list, frame: dict) -> None:
        for stmt in body:
            self.exec_stmt(stmt, frame)

    def exec_stmt(self, node: ast.stmt, frame: dict) -> None:
        self.ctx.charge()
        if isinstance(node, ast.Expr):
            self.eval(node.value, frame)
        elif isinstance(node, ast.Assign):
            value = self.eval(node.value, frame)
            for target in node.targets:
                self.assign(target, value, frame)
        elif isinstance(node, ast.AugAssign):
            if not isinstance(node.target, ast.Name):
                raise ProgramError("augmented assignment only to names")
            current = self.lookup(node.target.id, frame)
            frame[node.target.id] = self.binop(node.op, current, self.eval(node.value, frame))
        elif isinstance(node, ast.If):
            branch = node.body if self.eval(node.test, frame) else node.orelse
            self.exec_block(branch, frame)
        elif isinstance(node, ast.While):
            while self.eval(node.test, frame):
                self.ctx.charge()
                try:
                    self.exec_block(node.body, frame)
                except _Break:
                    break
                except _Continue:
                    continue
        elif isinstance(node, ast.For):
            iterable = self.eval(node.iter, frame)
            if not isinstance(iterable, (list, tuple, range, str)):
                raise ProgramError("for loops iterate lists, tuples, ranges, or strings only")
            for item in iterable:
                self.ctx.charge()
                self.assign(node.target, item, frame)
                try:
                    self.exec_block(node.body, frame)
                except _Break:
                    break
                except _Continue:
                    continue
        elif isinstance(node, ast.Return):
            raise _Return(self.eval(node.value, frame) if node.value is not None else None)
        elif isinstance(node, ast.Break):
            raise _Break()
        elif isinstance(node, ast.Continue):
            raise _Continue()
        elif isinstance(node, ast.Pass):
            pass
        else:  # pragma: no cover - guarded by validation
            raise ProgramError(f"unsupported statement {type(node).__name__}")

    def assign(self, target: ast.expr, value: Any, frame: dict) -> None:
        if isinstance(target, ast.Name):
            frame[target.id] = value
        elif isinstance(target, ast.Tuple):
            values = list(value) if isinstance(value, (list, tuple)) else None
            if values is None or len(values) != len(target.elts):
                raise ProgramError("cannot unpack value into targets")
            for t, v in zip(target.elts, values):
                self.assign(t, v, frame)
        else:
            raise ProgramError("assignment targets must be names or tuples of names")

    def lookup(self, name: str, frame: dict) -> Any:
        if name in frame:
            return frame[name]
        if name in self.globals:
            return self.globals[name]
        raise ProgramError(f"name {name!r} is not defined")

    def eval(self, node: ast.expr, frame: dict) -> Any:
        self.ctx.charge()
        if isinstance(node, ast.Constant):
            return node.value
        if isinstance(node, ast.Name):
            return self.lookup(node.id, frame)
        if isinstance(node, ast.BinOp):
            return self.binop(node.op, self.eval(node.left, frame), self.eval(node.right, frame))
        if isinstance(node, ast.UnaryOp):
            operand = self.eval(node.operand, frame)
            if isinstance(node.op, ast.Not):
                return not operand
            if isinstance(node.op, ast.USub):
                return -operand
            return +operand
        if isinstance(node, ast.BoolOp):
            if isinstance(node.op, ast.And):
                result = True
                for value in node.values:
                    result = self.eval(value, frame)
                    if not result:
                        return result
                return result
            for value in node.values:
                result = self.eval(value, frame)
                if result:
                    return result
            return result
        if isinstance(node, ast.Compare):
            left = self.eval(node.left, frame)
            for op, comparator in zip(node.ops, node.comparators):
                right = self.eval(comparator, frame)
                if not self.compare(op, left, right):
                    return False
                left = right
            return True
        if isinstance(node, ast.Call):
            return self.call(node, frame)
        if isinstance(node, ast.Subscript):
            obj = self.eval(node.value, frame)
            key = self.eval(node.slice, frame)
            if isinstance(obj, (str, list, tuple, dict, bytes)):
                try:
                    return obj[key]
                except (KeyError, IndexError, TypeError) as exc:
                    raise ProgramError(f"bad subscript: {exc}") from exc
            raise ProgramError(f"subscript not supported on {type(obj).__name__}")
        if isinstance(node, ast.List):
            return [self.eval(e, frame) for e in node.elts]
        if isinstance(node, ast.Tuple):
            return tuple(self.eval(e, frame) for e in node.elts)
        if isinstance(node, ast.Dict):
            return {
                self.eval(k, frame): self.eval(v, frame)
                for k, v in zip(node.keys, node.values)
            }
        if isinstance(node, ast.IfExp):
            return self.eval(node.body if self.eval(node.test, frame) else node.orelse, frame)
        if isinstance(node, ast.Attribute):
            raise ProgramError("attribute access is only available as a method call")
        raise ProgramError(f"unsupported expression {type(node).__name__}")

    def call(self, node: ast.Call, frame: dict) -> Any:
        if node.keywords:
            raise ProgramError("keyword arguments are not supported")
        args = [self.eval(a, frame) for a in node.args]
        if isinstance(node.func, ast.Name):
            name = node.func.id
            if name in self.program.functions:
                return self.call_function(self.program.functions[name], args)
            fn = self.lookup(name, frame)
            if fn in _SAFE_BUILTINS.values() and callable(fn):
                return self._invoke(fn, args)
            raise ProgramError(f"{name!r} is not callable here")
        if isinstance(node.func, ast.Attribute):
            obj = self.eval(node.func.value, frame)
            return self.method_call(obj, node.func.attr, args)
        raise ProgramError("only simple calls are supported")

    def method_call(self, obj: Any, name: str, args: list) -> Any:
        if isinstance(obj, _HOST_TYPES):
            method = getattr(obj, name, None)
            if method is None or name.startswith("_") or not callable(method):
                raise ProgramError(f"host object has no method {name!r}")
            return self._invoke(method, args)
        if isinstance(obj, str) and name in _STR_METHODS:
            return self._invoke(getattr(obj, name), args)
        if isinstance(obj, list) and name in _LIST_METHODS:
            return self._invoke(getattr(obj, name), args)
        if isinstance(obj, dict) and name in _DICT_METHODS:
            result = self._invoke(getattr(obj, name), args)
            return list(result) if name in ("keys", "values", "items") else result
        raise ProgramError(f"method {name!r} not available on {type(obj).__name__}")

    def _invoke(self, fn, args: list) -> Any:
        try:
            return fn(*args)
        except (BudgetExceeded, ProgramError):
            raise
        except Exception as exc:
            raise ProgramError(f"{type(exc).__name__}: {exc}") from exc

    def binop(self, op: ast.operator, left: Any, right: Any) -> Any:
        try:
            if isinstance(op, ast.Add):
                return left + right
            if isinstance(op, ast.Sub):
                return left - right
            if isinstance(op, ast.Mult):
                return left * right
            if isinstance(op, ast.Div):
                return left / right
            if isinstance(op, ast.FloorDiv):
                return left // right
            if isinstance(op, ast.Mod):
                return left % right
        except Exception as exc:
            raise ProgramError(f"arithmetic fault: {exc}") from exc
        raise ProgramError(f"operator {type(op).__name__} not supported")

    @staticmethod
    def compare(op: ast.cmpop, left: Any, right: Any) -> bool:
        try:
            if isinstance(op, ast.Eq):
                return left == right
            if isinstance(op, ast.NotEq):
                return left != right
            if isinstance(op, ast.Lt):
                return left < right
            if isinstance(op, ast.LtE):
                return left <= right
            if isinstance(op, ast.Gt):
                return left > right
            if isinstance(op, ast.GtE):
                return left >= right
            if isinstance(op, ast.In):
                return left in right
            if isinstance(op, ast.NotIn):
                return left not in right
            if isinstance(op, ast.Is):
                return left is right
            if isinstance(op, ast.IsNot):
                return left is not right
        except TypeError as exc:
            raise ProgramError(f"comparison fault: {exc}") from exc
        raise ProgramError(f"comparison {type(op).__name__} not supported")
