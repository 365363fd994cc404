"""Compiled forward/backward passes over expression tapes.

A tape is stored as parallel arrays: an opcode per node plus up to two
parent indices.  Values and adjoints live in (n_nodes, batch) float64
matrices so one pass evaluates a whole column batch.  Leaf rows (constants,
parameters, inputs) must be filled by the caller before ``forward_pass``.
"""

import numpy as np
from numba import njit

# Opcodes.  Leaves first; the forward pass skips anything <= OP_INPUT.
OP_CONST = 0
OP_PARAM = 1
OP_INPUT = 2
OP_ADD = 3
OP_MUL = 4
OP_NEG = 5
OP_EXP = 6
OP_LOG = 7
OP_TANH = 8
OP_RELU = 9
OP_MAX = 10
OP_ABS = 11
# Internal helper ops emitted when a gradient is recorded onto the tape.
# Their own derivative is zero everywhere it exists, matching the
# subgradient convention relu'(0) = 0, abs'(0) = 0, max ties -> first.
OP_SIGN = 12     # sign(a) with sign(0) = 0
OP_STEPGT = 13   # 1.0 if a > 0 else 0.0
OP_STEPGE = 14   # 1.0 if a >= b else 0.0
OP_RECIP = 15    # 1 / a

N_LEAF_OPS = 3


@njit(cache=True)
def forward_pass(ops, p1, p2, vals):
    """Evaluate every non-leaf row of ``vals`` in tape order."""
    n = ops.shape[0]
    width = vals.shape[1]
    for i in range(n):
        op = ops[i]
        if op < N_LEAF_OPS:
            continue
        a = p1[i]
        b = p2[i]
        if op == OP_ADD:
            for k in range(width):
                vals[i, k] = vals[a, k] + vals[b, k]
        elif op == OP_MUL:
            for k in range(width):
                vals[i, k] = vals[a, k] * vals[b, k]
        elif op == OP_NEG:
            for k in range(width):
                vals[i, k] = -vals[a, k]
        elif op == OP_EXP:
            for k in range(width):
                vals[i, k] = np.exp(vals[a, k])
        elif op == OP_LOG:
            for k in range(width):
                vals[i, k] = np.log(vals[a, k])
        elif op == OP_TANH:
            for k in range(width):
                vals[i, k] = np.tanh(vals[a, k])
        elif op == OP_RELU:
            for k in range(width):
                v = vals[a, k]
                vals[i, k] = v if v > 0.0 else 0.0
        elif op == OP_MAX:
            for k in range(width):
                va = vals[a, k]
                vb = vals[b, k]
                vals[i, k] = va if va >= vb else vb
        elif op == OP_ABS:
            for k in range(width):
                v = vals[a, k]
                vals[i, k] = v if v >= 0.0 else -v
        elif op == OP_SIGN:
            for k in range(width):
                v = vals[a, k]
                if v > 0.0:
                    vals[i, k] = 1.0
                elif v < 0.0:
                    vals[i, k] = -1.0
                else:
                    vals[i, k] = 0.0
        elif op == OP_STEPGT:
            for k in range(width):
                vals[i, k] = 1.0 if vals[a, k] > 0.0 else 0.0
        elif op == OP_STEPGE:
            for k in range(width):
                vals[i, k] = 1.0 if vals[a, k] >= vals[b, k] else 0.0
        elif op == OP_RECIP:
            for k in range(width):
                vals[i, k] = 1.0 / vals[a, k]


@njit(cache=True)
def backward_pass(ops, p1, p2, vals, adj, start):
    """Propagate adjoints from row ``start`` down to the leaves.

    ``adj`` must be zeroed and seeded by the caller.  Local derivatives at
    the kinks follow the stored convention: relu and abs contribute zero at
    the origin, max routes everything to its first argument on ties, and
    the helper ops (sign, step, recip used as recorded derivatives) are
    treated as locally constant.
    """
    width = vals.shape[1]
    for i in range(start, -1, -1):
        op = ops[i]
        if op < N_LEAF_OPS or op == OP_SIGN or op == OP_STEPGT or op == OP_STEPGE:
            continue
        a = p1[i]
        b = p2[i]
        if op == OP_ADD:
            for k in range(width):
                g = adj[i, k]
                adj[a, k] += g
                adj[b, k] += g
        elif op == OP_MUL:
            for k in range(width):
                g = adj[i, k]
                adj[a, k] += g * vals[b, k]
                adj[b, k] += g * vals[a, k]
        elif op == OP_NEG:
            for k in range(width):
                adj[a, k] -= adj[i, k]
        elif op == OP_EXP:
            for k in range(width):
                adj[a, k] += adj[i, k] * vals[i, k]
        elif op == OP_LOG:
            for k in range(width):
                adj[a, k] += adj[i, k] / vals[a, k]
        elif op == OP_TANH:
            for k in range(width):
                t = vals[i, k]
                adj[a, k] += adj[i, k] * (1.0 - t * t)
        elif op == OP_RELU:
            for k in range(width):
                if vals[a, k] > 0.0:
                    adj[a, k] += adj[i, k]
        elif op == OP_MAX:
            for k in range(width):
                if vals[a, k] >= vals[b, k]:
                    adj[a, k] += adj[i, k]
                else:
                    adj[b, k] += adj[i, k]
        elif op == OP_ABS:
            for k in range(width):
                v = vals[a, k]
                if v > 0.0:
                    adj[a, k] += adj[i, k]
                elif v < 0.0:
                    adj[a, k] -= adj[i, k]
        elif op == OP_RECIP:
            for k in range(width):
                r = vals[i, k]
                adj[a, k] -= adj[i, k] * r * r
