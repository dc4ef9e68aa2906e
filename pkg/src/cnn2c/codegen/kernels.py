"""Shared machinery for emitting per-layer C functions.

Every layer becomes ``static void lN(const float *x, float *y)``. Loops that
the unroll plan keeps rolled are written as ``for`` statements; the rest are
expanded at generation time into straight-line *units* (self-contained C
blocks). Very long straight-line bodies are split into helper functions so
that compile time stays roughly linear in code size.

Convolution, pooling and activation kernels are parameterised by a *lane*:
one float (generic backend) or a 4-float ``__m128`` (SSSE3 backend) along
the channel axis.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from ..model import Conv2D, MaxPool2D, Shape3, conv_padding, layer_output_shape
from .literals import format_float_literal
from .loops import Ix, Loop, UnrollLevel, iterate

CHUNK_TERMS = 2048
PAD_BUFFER = "s_pad"


@dataclass
class Unit:
    lines: list[str]
    cost: int


@dataclass
class Fragment:
    """C code for one layer: static data, helpers and the layer function."""

    name: str
    statics: list[str] = field(default_factory=list)
    support: list[str] = field(default_factory=list)
    functions: list[str] = field(default_factory=list)
    pad_floats: int = 0
    needs_math: bool = False
    vectorized: bool = False
    note: str = ""

    @property
    def compute(self) -> str:
        """The layer's compute functions, without static data or pad setup."""
        return "\n\n".join(self.functions)

    @property
    def text(self) -> str:
        return "\n\n".join(self.statics + self.support + self.functions)


@dataclass(frozen=True)
class ConvVariant:
    """A loop schedule for convolution; every variant keeps the per-output
    accumulation order (bias, then kernel row, column, input channel)."""

    id: int
    name: str
    order: tuple[str, ...]
    block: int = 1

    @property
    def first_reduction(self) -> int:
        return self.order.index("n")


CONV_VARIANTS = (
    ConvVariant(0, "direct", ("i", "j", "k", "n", "m", "o")),
    ConvVariant(1, "channel-inner", ("i", "j", "n", "m", "o", "k")),
    ConvVariant(2, "width-blocked-2", ("i", "j", "k", "n", "m", "o", "jj"), block=2),
)


def conv_variant(vid: int) -> ConvVariant:
    try:
        return CONV_VARIANTS[vid]
    except (IndexError, TypeError):
        raise ValueError(f"unknown conv variant {vid!r}; known ids 0..{len(CONV_VARIANTS) - 1}")


def block(lines) -> list[str]:
    return ["    " + line for line in lines]


def c_function(name: str, params: str, decls, body) -> str:
    lines = [f"static void {name}({params})", "{"]
    lines += block(decls)
    lines += block(body)
    lines.append("}")
    return "\n".join(lines)


def _chunks(units: list[Unit]):
    group, cost = [], 0
    for unit in units:
        if group and cost + unit.cost > CHUNK_TERMS:
            yield group
            group, cost = [], 0
        group.append(unit)
        cost += unit.cost
    if group:
        yield group


@dataclass
class Nest:
    loops: list[Loop]
    n_rolled: int
    unit: object  # Callable[[dict], Unit]


def layer_functions(name: str, nests: list[Nest], prologue=()) -> list[str]:
    """Helpers plus the layer function running ``nests`` one after another."""
    helpers: list[str] = []
    body: list[str] = list(prologue)
    int_vars: list[str] = []
    for ni, nest in enumerate(nests):
        rolled, unrolled = nest.loops[: nest.n_rolled], nest.loops[nest.n_rolled :]
        base = {l.var: Ix.var(l.var) for l in rolled}
        units = [nest.unit(env) for env in iterate(unrolled, base, rolled=False)]
        inner: list[str] = []
        if len(units) > 1 and sum(u.cost for u in units) > CHUNK_TERMS:
            params = ", ".join(["const float *x", "float *y"] + [f"int {l.var}" for l in rolled])
            args = ", ".join(["x", "y"] + [l.var for l in rolled])
            for gi, group in enumerate(_chunks(units)):
                hname = f"{name}_{ni}_{gi}" if len(nests) > 1 else f"{name}_{gi}"
                helpers.append(c_function(hname, params, [], [l for u in group for l in u.lines]))
                inner.append(f"{hname}({args});")
        else:
            inner = [l for u in units for l in u.lines]
        for loop in reversed(rolled):
            inner = [loop.header(), *block(inner), "}"]
        body += inner
        int_vars += [l.var for l in rolled if l.var not in int_vars]
    decls = [f"int {', '.join(int_vars)};"] if int_vars else []
    return helpers + [c_function(name, "const float *x, float *y", decls, body)]


def walk(loops, env: dict, rolled_flags, emit) -> tuple[list[str], int]:
    """Emit ``loops`` around ``emit(env)``: rolled ones as for-loops, the rest expanded.

    ``emit`` returns ``(lines, cost)``; empty bodies vanish along with their loops.
    """
    if not loops:
        return emit(env)
    loop, *tail = loops
    if rolled_flags[0]:
        lines, cost = walk(tail, {**env, loop.var: Ix.var(loop.var)}, rolled_flags[1:], emit)
        return ([loop.header(), *block(lines), "}"], cost) if lines else ([], 0)
    lines, cost = [], 0
    for value in range(loop.start, loop.start + loop.extent):
        sub, c = walk(tail, {**env, loop.var: Ix(const=value)}, rolled_flags[1:], emit)
        lines += sub
        cost += c
    return lines, cost


def float_array(name: str, values, aligned: bool = False, per_line: int = 8) -> str:
    flat = [format_float_literal(v) for v in values.ravel()]
    rows = [", ".join(flat[i : i + per_line]) for i in range(0, len(flat), per_line)]
    qual = "static CNN2C_ALIGN16 const float" if aligned else "static const float"
    return f"{qual} {name}[{len(flat)}] = {{\n    " + ",\n    ".join(rows) + "\n};"


def plus_term(weight: str, operand: str) -> str:
    """`` + w*x`` with a negative literal weight written as `` - |w|*x``."""
    if weight.startswith("-"):
        return f" - {weight[1:]}*{operand}"
    return f" + {weight}*{operand}"


class Lane:
    """Channel-axis arithmetic for one accumulator element."""

    width = 1
    ctype = "float"
    vector = False

    def __init__(self, x_aligned: bool = True, y_aligned: bool = True):
        self.x_aligned = x_aligned
        self.y_aligned = y_aligned

    def load(self, ptr: str, index: Ix) -> str:
        return f"{ptr}[{index}]"

    def store(self, ptr: str, index: Ix, value: str) -> str:
        return f"{ptr}[{index}] = {value};"

    def broadcast(self, ptr: str, index: Ix) -> str:
        return f"{ptr}[{index}]"

    def mac(self, acc: str, weight: str, operand: str) -> str:
        return f"{acc} = {acc}{plus_term(weight, operand)};"

    def max_update(self, acc: str, value: str) -> str:
        return f"{acc} = {value} > {acc} ? {value} : {acc};"


class VectorLane(Lane):
    width = 4
    ctype = "__m128"
    vector = True

    def load(self, ptr: str, index: Ix) -> str:
        op = "_mm_load_ps" if (ptr != "x" or self.x_aligned) else "_mm_loadu_ps"
        return f"{op}(&{ptr}[{index}])"

    def store(self, ptr: str, index: Ix, value: str) -> str:
        op = "_mm_store_ps" if (ptr != "y" or self.y_aligned) else "_mm_storeu_ps"
        return f"{op}(&{ptr}[{index}], {value});"

    def broadcast(self, ptr: str, index: Ix) -> str:
        return f"_mm_set1_ps({ptr}[{index}])"

    def mac(self, acc: str, weight: str, operand: str) -> str:
        return f"{acc} = _mm_add_ps({acc}, _mm_mul_ps({weight}, {operand}));"

    def max_update(self, acc: str, value: str) -> str:
        # maxps(a, b) returns a > b ? a : b, the same selection as the scalar chain.
        return f"{acc} = _mm_max_ps({value}, {acc});"


# ---------------------------------------------------------------- convolution


class ConvKernel:
    def __init__(self, index: int, layer: Conv2D, in_shape: Shape3, variant: ConvVariant,
                 unroll: UnrollLevel, lane: Lane):
        self.index = index
        self.layer = layer
        self.variant = variant
        self.unroll = unroll
        self.lane = lane
        self.in_shape = in_shape
        (self.kh, self.kw), (self.sh, self.sw) = layer.kernel_size, layer.stride
        self.C = layer.in_channels
        self.K = layer.filters
        if self.K % lane.width:
            raise ValueError(f"{self.K} filters do not divide into {lane.width}-wide lanes")
        self.out = layer_output_shape(layer, in_shape)
        self.pt, pb, self.pl, pr = conv_padding(layer, in_shape)
        self.has_padding = any((self.pt, pb, self.pl, pr))
        # Rolled loops index rows symbolically, so they read a zero-padded copy.
        self.padded = self.has_padding and unroll.keep_outer != 0
        self.Hp = in_shape.height + self.pt + pb
        self.Wp = in_shape.width + self.pl + pr
        self.weights_name = f"w{index}"
        self.bias_name = f"b{index}"
        self.uses_weights = self.uses_bias = lane.vector

    @property
    def src(self) -> str:
        return PAD_BUFFER if self.padded else "x"

    def x_index(self, env, j: Ix) -> Ix | None:
        """Input element for output column ``j``; None where it is zero padding."""
        row = env["i"] * self.sh + env["n"]
        col = j * self.sw + env["m"]
        if self.padded:
            return (row * self.Wp + col) * self.C + env["o"]
        if self.has_padding:
            r, c = int(row) - self.pt, int(col) - self.pl
            if not (0 <= r < self.in_shape.height and 0 <= c < self.in_shape.width):
                return None
            row, col = Ix(const=r), Ix(const=c)
        return (row * self.in_shape.width + col) * self.C + env["o"]

    def weight(self, env) -> str:
        k = env["k"] * self.lane.width
        idx = ((env["n"] * self.kw + env["m"]) * self.C + env["o"]) * self.K + k
        if self.lane.vector:
            return self.lane.load(self.weights_name, idx)
        if idx.is_const:
            n, m, o = int(env["n"]), int(env["m"]), int(env["o"])
            return format_float_literal(self.layer.kernel[n, m, o, int(k)])
        self.uses_weights = True
        return f"{self.weights_name}[{idx}]"

    def bias(self, env) -> str:
        k = env["k"] * self.lane.width
        if self.lane.vector:
            return self.lane.load(self.bias_name, k)
        if k.is_const:
            return format_float_literal(self.layer.bias[int(k)])
        self.uses_bias = True
        return f"{self.bias_name}[{k}]"

    def out_index(self, env, j: Ix) -> Ix:
        return (env["i"] * self.out.width + j) * self.K + env["k"] * self.lane.width

    def nests(self) -> list[Nest]:
        v = self.variant
        W = self.out.width
        if v.block == 1:
            specs = [(v.order, Loop("j", W), lambda env: env["j"])]
        else:
            specs = []
            if W // v.block:
                specs.append(
                    (v.order, Loop("j", W // v.block), lambda env: env["j"] * v.block + env["jj"])
                )
            if W % v.block:
                # Leftover columns run the unblocked schedule.
                order = tuple(x for x in v.order if x != "jj")
                specs.append((order, Loop("j", W % v.block, W - W % v.block), lambda env: env["j"]))
        nests = []
        for order, j_loop, j_of in specs:
            by_var = {
                "i": Loop("i", self.out.height),
                "j": j_loop,
                "k": Loop("k", self.K // self.lane.width),
                "n": Loop("n", self.kh),
                "m": Loop("m", self.kw),
                "o": Loop("o", self.C),
                "jj": Loop("jj", v.block),
            }
            loops = [by_var[name] for name in order]
            r = self.unroll.rolled_count(len(loops))
            first = order.index("n")
            rest = loops[first:]
            rest_rolled = [idx < r for idx in range(first, len(loops))]
            nests.append(Nest(loops[:first], min(r, first), self._unit_factory(rest, rest_rolled, j_of)))
        return nests

    def _unit_factory(self, rest, rest_rolled, j_of):
        inner_outputs = [l for l in rest if l.var in ("k", "jj")]

        def unit(env):
            if not self.lane.vector and not inner_outputs and not any(rest_rolled):
                return self._chain_unit(env, rest, j_of)
            return self._general_unit(env, rest, rest_rolled, inner_outputs, j_of)

        return unit

    def _chain_unit(self, env, rest, j_of) -> Unit:
        """One statement per output: ``y = b + w*x + w*x ...`` (left to right)."""
        j = j_of(env)
        expr = self.bias(env)
        cost = 0
        for e in iterate(rest, env, rolled=False):
            xi = self.x_index(e, j)
            if xi is not None:
                expr += plus_term(self.weight(e), f"{self.src}[{xi}]")
                cost += 1
        return Unit([f"y[{self.out_index(env, j)}] = {expr};"], max(cost, 1))

    def _general_unit(self, env, rest, rest_rolled, inner_outputs, j_of) -> Unit:
        lane = self.lane
        io_flags = [r for l, r in zip(rest, rest_rolled) if l in inner_outputs]
        acc_rolled = any(io_flags)
        n_acc = 1
        for loop in inner_outputs:
            n_acc *= loop.extent

        def acc(e) -> str:
            if not inner_outputs:
                return "a"
            flat = Ix()
            for loop in inner_outputs:
                flat = flat * loop.extent + (e[loop.var] - loop.start)
            return f"a[{flat}]" if acc_rolled else f"a{int(flat)}"

        decls = []
        ints = [l.var for l, r in zip(rest, rest_rolled) if r]
        if ints:
            decls.append(f"int {', '.join(ints)};")
        if not inner_outputs:
            decls.append(f"{lane.ctype} a;")
        elif acc_rolled:
            decls.append(f"{lane.ctype} a[{n_acc}];")
        else:
            decls.append(f"{lane.ctype} {', '.join(f'a{c}' for c in range(n_acc))};")

        # Hoist what the innermost output loop leaves invariant: the input
        # value across channel groups, the weight across blocked columns.
        last = rest[-1]
        hoist_x = last.var == "k"
        hoist_w = last.var == "jj" and lane.vector
        if hoist_x:
            decls.append(f"{lane.ctype} t;")
        if hoist_w:
            decls.append(f"{lane.ctype} wv;")

        def mac(e):
            xi = self.x_index(e, j_of(e))
            if xi is None:
                return [], 0
            operand = "t" if hoist_x else lane.broadcast(self.src, xi)
            weight = "wv" if hoist_w else self.weight(e)
            return [lane.mac(acc(e), weight, operand)], 1

        def hoisted(e):
            if hoist_x:
                xi = self.x_index(e, j_of(e))
                if xi is None:
                    return [], 0
                body, cost = walk([last], e, rest_rolled[-1:], mac)
                return [f"t = {lane.broadcast(self.src, xi)};", *body], cost
            body, cost = walk([last], e, rest_rolled[-1:], mac)
            if not body:
                return [], 0
            return [f"wv = {self.weight(e)};", *body], cost

        init, _ = walk(inner_outputs, env, io_flags, lambda e: ([f"{acc(e)} = {self.bias(e)};"], 0))
        if hoist_x or hoist_w:
            reduction, cost = walk(rest[:-1], env, rest_rolled[:-1], hoisted)
        else:
            reduction, cost = walk(rest, env, rest_rolled, mac)
        store, _ = walk(
            inner_outputs, env, io_flags,
            lambda e: ([lane.store("y", self.out_index(e, j_of(e)), acc(e))], 0),
        )
        return Unit(["{", *block(decls + init + reduction + store), "}"], max(cost, 1))

    def pad_function(self) -> str:
        H, W, C = self.in_shape
        conds = []
        if self.pt:
            conds.append(f"r >= {self.pt}")
        if self.Hp - self.pt > H:
            conds.append(f"r < {self.pt + H}")
        if self.pl:
            conds.append(f"c >= {self.pl}")
        if self.Wp - self.pl > W:
            conds.append(f"c < {self.pl + W}")
        src = ((Ix.var("r") - self.pt) * W + Ix.var("c") - self.pl) * C + Ix.var("o")
        body = [
            f"for (r = 0; r < {self.Hp}; r++) {{",
            f"    for (c = 0; c < {self.Wp}; c++) {{",
            f"        for (o = 0; o < {C}; o++) {{",
            f"            {PAD_BUFFER}[(r*{self.Wp} + c)*{C} + o] = ({' && '.join(conds)})"
            f" ? x[{src}] : 0.0f;",
            "        }",
            "    }",
            "}",
        ]
        return c_function(f"l{self.index}_pad", "const float *x", ["int r, c, o;"], body)

    def fragment(self, name: str) -> Fragment:
        prologue = [f"l{self.index}_pad(x);"] if self.padded else []
        frag = Fragment(name, vectorized=self.lane.vector)
        frag.functions = layer_functions(name, self.nests(), prologue)
        if self.padded:
            frag.support.append(self.pad_function())
            frag.pad_floats = self.Hp * self.Wp * self.C
        if self.uses_weights:
            frag.statics.append(float_array(self.weights_name, self.layer.kernel, self.lane.vector))
        if self.uses_bias:
            frag.statics.append(float_array(self.bias_name, self.layer.bias, self.lane.vector))
        return frag


# -------------------------------------------------------------------- pooling


def pool_fragment(name: str, layer: MaxPool2D, in_shape: Shape3, unroll: UnrollLevel,
                  lane: Lane) -> Fragment:
    out = layer_output_shape(layer, in_shape)
    (kh, kw), (sh, sw) = layer.window, layer.stride
    C, Win = in_shape.channels, in_shape.width
    if C % lane.width:
        raise ValueError(f"{C} channels do not divide into {lane.width}-wide lanes")
    loops = [
        Loop("i", out.height),
        Loop("j", out.width),
        Loop("k", C // lane.width),
        Loop("n", kh),
        Loop("m", kw),
    ]
    r = unroll.rolled_count(len(loops))
    rest, rest_rolled = loops[3:], [idx < r for idx in range(3, 5)]

    def x_index(e) -> Ix:
        return ((e["i"] * sh + e["n"]) * Win + e["j"] * sw + e["m"]) * C + e["k"] * lane.width

    def update(e):
        if not any(rest_rolled) and int(e["n"]) == 0 and int(e["m"]) == 0:
            return [], 0
        return [lane.max_update("a", lane.load("x", x_index(e)))], 1

    def unit(env) -> Unit:
        # Rolled windows revisit the first element; v > a is false there, so a is unchanged.
        first = lane.load("x", x_index({**env, "n": Ix(), "m": Ix()}))
        chain, cost = walk(rest, env, rest_rolled, update)
        out_idx = (env["i"] * out.width + env["j"]) * C + env["k"] * lane.width
        decls = [f"{lane.ctype} a;"]
        ints = [l.var for l, rl in zip(rest, rest_rolled) if rl]
        if ints:
            decls.insert(0, f"int {', '.join(ints)};")
        lines = [f"a = {first};", *chain, lane.store("y", out_idx, "a")]
        return Unit(["{", *block(decls + lines), "}"], cost + 1)

    functions = layer_functions(name, [Nest(loops[:3], min(r, 3), unit)])
    return Fragment(name, functions=functions, vectorized=lane.vector)


# ----------------------------------------------------------------- elementwise


def elementwise_fragment(name: str, shape: Shape3, unroll: UnrollLevel, lane: Lane,
                         expr) -> Fragment:
    """``y = expr(x)`` over every element, three loops deep."""
    H, W, C = shape
    if C % lane.width:
        raise ValueError(f"{C} channels do not divide into {lane.width}-wide lanes")
    loops = [Loop("i", H), Loop("j", W), Loop("k", C // lane.width)]
    r = unroll.rolled_count(len(loops))

    def unit(env) -> Unit:
        idx = (env["i"] * W + env["j"]) * C + env["k"] * lane.width
        return Unit([lane.store("y", idx, expr(lane.load("x", idx)))], 1)

    return Fragment(name, functions=layer_functions(name, [Nest(loops, r, unit)]),
                    vectorized=lane.vector)


# -------------------------------------------------------------------- softmax


def softmax_fragment(name: str, shape: Shape3, unroll: UnrollLevel) -> Fragment:
    H, W, C = shape
    loops = [Loop("i", H), Loop("j", W)]
    r = unroll.rolled_count(3)
    channel_rolled = r >= 3

    def unit(env) -> Unit:
        base = (env["i"] * W + env["j"]) * C

        def x(k):
            return f"x[{base + k}]"

        def y(k):
            return f"y[{base + k}]"

        if channel_rolled:
            k = Ix.var("k")
            lines = [
                f"m = {x(0)};",
                f"for (k = 1; k < {C}; k++) {{",
                f"    m = {x(k)} > m ? {x(k)} : m;",
                "}",
                f"for (k = 0; k < {C}; k++) {{",
                f"    {y(k)} = (float)exp((double)({x(k)} - m));",
                "}",
                f"s = {y(0)};",
                f"for (k = 1; k < {C}; k++) {{",
                f"    s = s + {y(k)};",
                "}",
                f"for (k = 0; k < {C}; k++) {{",
                f"    {y(k)} = {y(k)} / s;",
                "}",
            ]
            decls = ["int k;", "float m, s;"]
        else:
            lines = [f"m = {x(0)};"]
            lines += [f"m = {x(k)} > m ? {x(k)} : m;" for k in range(1, C)]
            lines += [f"{y(k)} = (float)exp((double)({x(k)} - m));" for k in range(C)]
            lines.append(f"s = {' + '.join(y(k) for k in range(C))};")
            lines += [f"{y(k)} = {y(k)} / s;" for k in range(C)]
            decls = ["float m, s;"]
        return Unit(["{", *block(decls + lines), "}"], 4 * C)

    functions = layer_functions(name, [Nest(loops, min(r, 2), unit)])
    return Fragment(name, functions=functions, needs_math=True)
