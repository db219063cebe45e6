"""In-memory property graph with idempotent MERGE and a tiny Cypher subset.

Supported statements::

    MERGE (n:Label {uid: 'x'}) SET n.prop = 'v', n.other = 1
    MERGE (a:L1 {uid: 'x'}) MERGE (b:L2 {uid: 'y'}) MERGE (a)-[:REL]->(b)
    MATCH (n) RETURN count(n)
    MATCH (n:Label) RETURN count(n)
    MATCH (n:Label {uid: 'x'}) RETURN count(n)
    MATCH ()-[r]->() RETURN count(r)
    MATCH ()-[r:REL]->() RETURN count(r)

Nodes are keyed by (label, uid) and relationships by (type, from, to).
"""
from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from typing import Any

KEY_PROPERTY = "uid"

_TOKEN_RE = re.compile(
    r"""\s*(?:
        (?P<str>'(?:[^'\\]|\\.)*'|"(?:[^"\\]|\\.)*")
      | (?P<num>-?\d+(?:\.\d+)?(?![A-Za-z_]))
      | (?P<ident>[A-Za-z_][A-Za-z0-9_]*|`[^`]+`)
      | (?P<punct>->|[()\[\]{}:,.=\-*])
    )""",
    re.X,
)


class GraphQueryError(ValueError):
    pass


@dataclass
class _Tok:
    kind: str
    text: str
    value: Any = None


def tokenize(query: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    query = query.rstrip().rstrip(";")
    while pos < len(query):
        if query[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(query, pos)
        if not m or m.end() == pos:
            bad = query[pos:].strip().split()[0] if query[pos:].strip() else query[pos:]
            raise GraphQueryError(f"unexpected token {bad!r}")
        pos = m.end()
        if m.group("str") is not None:
            raw = m.group("str")[1:-1]
            toks.append(_Tok("value", m.group("str"), re.sub(r"\\(.)", r"\1", raw)))
        elif m.group("num") is not None:
            text = m.group("num")
            toks.append(_Tok("value", text, float(text) if "." in text else int(text)))
        elif m.group("ident") is not None:
            text = m.group("ident")
            lowered = text.lower()
            if lowered in ("true", "false"):
                toks.append(_Tok("value", text, lowered == "true"))
            elif lowered == "null":
                toks.append(_Tok("value", text, None))
            else:
                toks.append(_Tok("ident", text.strip("`")))
        else:
            toks.append(_Tok("punct", m.group("punct")))
    return toks


@dataclass
class _NodePat:
    var: str | None
    label: str | None
    props: dict[str, Any] = field(default_factory=dict)


@dataclass
class _RelPat:
    var: str | None
    type: str | None
    left: _NodePat
    right: _NodePat


class _Parser:
    def __init__(self, toks: list[_Tok]) -> None:
        self.toks = toks
        self.i = 0

    def peek(self) -> _Tok | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def next(self) -> _Tok:
        tok = self.peek()
        if tok is None:
            raise GraphQueryError("unexpected end of query")
        self.i += 1
        return tok

    def expect(self, text: str) -> None:
        tok = self.next()
        if tok.text.upper() != text.upper() or tok.kind == "value":
            raise GraphQueryError(f"expected {text!r} but found {tok.text!r}")

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind != "value" and tok.text.upper() == text.upper()

    def ident(self) -> str:
        tok = self.next()
        if tok.kind != "ident":
            raise GraphQueryError(f"expected a name but found {tok.text!r}")
        return tok.text

    def value(self) -> Any:
        tok = self.next()
        if tok.kind != "value":
            raise GraphQueryError(f"expected a literal value but found {tok.text!r}")
        return tok.value

    def node(self) -> _NodePat:
        self.expect("(")
        var = label = None
        props: dict[str, Any] = {}
        if self.peek() is not None and self.peek().kind == "ident":
            var = self.ident()
        if self.at(":"):
            self.next()
            label = self.ident()
        if self.at("{"):
            self.next()
            while not self.at("}"):
                key = self.ident()
                self.expect(":")
                props[key] = self.value()
                if self.at(","):
                    self.next()
                elif not self.at("}"):
                    raise GraphQueryError(f"expected ',' or '}}' but found {self.next().text!r}")
            self.next()
        self.expect(")")
        return _NodePat(var, label, props)

    def pattern(self) -> _NodePat | _RelPat:
        left = self.node()
        if not self.at("-"):
            return left
        self.next()
        self.expect("[")
        var = rtype = None
        if self.peek() is not None and self.peek().kind == "ident":
            var = self.ident()
        if self.at(":"):
            self.next()
            rtype = self.ident()
        self.expect("]")
        self.expect("->")
        return _RelPat(var, rtype, left, self.node())


class PropertyGraph:
    def __init__(self) -> None:
        self.nodes: dict[tuple[str, Any], dict[str, Any]] = {}
        self.relationships: dict[tuple[str, tuple, tuple], dict[str, Any]] = {}
        self._lock = threading.Lock()

    def counts(self) -> tuple[int, int]:
        with self._lock:
            return len(self.nodes), len(self.relationships)

    def run(self, query: str) -> dict[str, Any]:
        parser = _Parser(tokenize(query))
        if parser.at("MATCH"):
            return self._match(parser)
        ops = self._parse_updates(parser)
        with self._lock:
            return self._apply(ops)

    # MATCH ... RETURN count(x)
    def _match(self, p: _Parser) -> dict[str, Any]:
        p.next()
        pat = p.pattern()
        p.expect("RETURN")
        p.expect("count")
        p.expect("(")
        target = p.ident() if not p.at("*") else p.next().text
        p.expect(")")
        if p.peek() is not None:
            raise GraphQueryError(f"unexpected token {p.peek().text!r}")
        with self._lock:
            if isinstance(pat, _NodePat):
                if target not in ("*", pat.var):
                    raise GraphQueryError(f"unknown variable {target!r}")
                n = sum(1 for (label, _), props in self.nodes.items()
                        if (pat.label is None or label == pat.label)
                        and all(props.get(k) == v for k, v in pat.props.items()))
            else:
                if target not in ("*", pat.var):
                    raise GraphQueryError(f"unknown variable {target!r}")
                if pat.left.label or pat.left.props or pat.right.label or pat.right.props:
                    raise GraphQueryError("relationship MATCH supports only anonymous endpoints")
                n = sum(1 for (rtype, _, _) in self.relationships if pat.type is None or rtype == pat.type)
        return {"nodesCreated": 0, "relationshipsCreated": 0, "propertiesSet": 0, "matched": n}

    def _parse_updates(self, p: _Parser) -> list[tuple]:
        ops: list[tuple] = []
        bound: dict[str, tuple[str, Any]] = {}

        def node_key(pat: _NodePat) -> tuple[str, Any]:
            if pat.label is None and not pat.props:
                if pat.var not in bound:
                    raise GraphQueryError(f"unbound variable {pat.var!r}")
                return bound[pat.var]
            if pat.label is None:
                raise GraphQueryError("MERGE node pattern needs a label")
            if set(pat.props) != {KEY_PROPERTY}:
                raise GraphQueryError(f"MERGE node pattern must be keyed by {{{KEY_PROPERTY}: ...}} only")
            key = (pat.label, pat.props[KEY_PROPERTY])
            ops.append(("node", key))
            if pat.var:
                bound[pat.var] = key
            return key

        if p.peek() is None:
            raise GraphQueryError("empty query")
        while p.peek() is not None:
            tok = p.next()
            word = tok.text.upper() if tok.kind == "ident" else None
            if word == "MERGE":
                pat = p.pattern()
                if isinstance(pat, _NodePat):
                    node_key(pat)
                else:
                    if pat.type is None:
                        raise GraphQueryError("MERGE relationship needs a type")
                    ops.append(("rel", (pat.type, node_key(pat.left), node_key(pat.right))))
            elif word == "SET":
                while True:
                    var = p.ident()
                    if var not in bound:
                        raise GraphQueryError(f"unbound variable {var!r}")
                    p.expect(".")
                    prop = p.ident()
                    if prop == KEY_PROPERTY:
                        raise GraphQueryError(f"cannot SET key property {KEY_PROPERTY!r}")
                    p.expect("=")
                    ops.append(("set", bound[var], prop, p.value()))
                    if not p.at(","):
                        break
                    p.next()
            else:
                raise GraphQueryError(f"unexpected token {tok.text!r}")
        return ops

    def _apply(self, ops: list[tuple]) -> dict[str, Any]:
        created_nodes = created_rels = props_set = 0
        for op in ops:
            if op[0] == "node":
                if op[1] not in self.nodes:
                    self.nodes[op[1]] = {KEY_PROPERTY: op[1][1]}
                    created_nodes += 1
            elif op[0] == "rel":
                if op[1] not in self.relationships:
                    self.relationships[op[1]] = {}
                    created_rels += 1
            else:
                _, key, prop, value = op
                self.nodes[key][prop] = value
                props_set += 1
        return {"nodesCreated": created_nodes, "relationshipsCreated": created_rels,
                "propertiesSet": props_set, "matched": 0}
