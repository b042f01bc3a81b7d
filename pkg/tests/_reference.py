"""Scalar-loop reference encoder: same math as spanrel.encoder, zero numpy.

Every reduction is a plain Python left-to-right accumulation over explicit
indices, so this implementation has a single, fixed summation order. It exists
as an independent oracle for the vectorized encoder: agreement is checked to
tight tolerances, and its own outputs are bit-reproducible by construction.
"""

import math

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
LN_EPS = 1e-5


def _gelu(x):
    return 0.5 * x * (1.0 + math.tanh(GELU_C * (x + GELU_A * x ** 3)))


def _affine(rows, w, b):
    """rows (R x A) times w (A x B) plus b (B), accumulated left to right."""
    r_n = len(rows)
    a_n = len(w)
    b_n = len(w[0])
    out = []
    for r in range(r_n):
        row = []
        for c in range(b_n):
            acc = 0.0
            for a in range(a_n):
                acc += rows[r][a] * w[a][c]
            row.append(acc + b[c])
        out.append(row)
    return out


def _layer_norm(rows, gain, bias):
    d = len(rows[0])
    out = []
    for row in rows:
        s = 0.0
        for v in row:
            s += v
        mu = s / d
        sq = 0.0
        for v in row:
            sq += (v - mu) * (v - mu)
        inv = 1.0 / math.sqrt(sq / d + LN_EPS)
        out.append([(v - mu) * inv * gain[d_i] + bias[d_i] for d_i, v in enumerate(row)])
    return out


def reference_encode(config, params, token_ids, position_ids, mask, prefix="enc."):
    """Forward pass mirroring Encoder.encode, as nested Python loops.

    ``params`` is a mapping of parameter name to an indexable 1-D/2-D array
    (a ParameterStore state_dict works). Returns a list of T lists of floats.
    """
    d_model = config.d_model
    heads = config.n_heads
    d_head = d_model // heads
    inv_scale = 1.0 / math.sqrt(d_head)

    tok = params[prefix + "tok_emb"]
    pos = params[prefix + "pos_emb"]
    x = [
        [tok[t][d] + pos[p][d] for d in range(d_model)]
        for t, p in zip(token_ids, position_ids)
    ]
    t_len = len(x)
    visible = [[j for j in range(t_len) if mask[i][j]] for i in range(t_len)]

    for layer in range(config.n_layers):
        pfx = f"{prefix}l{layer}."
        q = _affine(x, params[pfx + "wq"], params[pfx + "bq"])
        k = _affine(x, params[pfx + "wk"], params[pfx + "bk"])
        v = _affine(x, params[pfx + "wv"], params[pfx + "bv"])

        merged = [[0.0] * d_model for _ in range(t_len)]
        for h in range(heads):
            lo = h * d_head
            for i in range(t_len):
                cols = visible[i]
                scores = []
                for j in cols:
                    acc = 0.0
                    for d in range(lo, lo + d_head):
                        acc += q[i][d] * k[j][d]
                    scores.append(acc * inv_scale)
                m = scores[0]
                for s in scores[1:]:
                    if s > m:
                        m = s
                exps = [math.exp(s - m) for s in scores]
                denom = 0.0
                for e in exps:
                    denom += e
                probs = [e / denom for e in exps]
                for d in range(d_head):
                    acc = 0.0
                    for p_j, j in zip(probs, cols):
                        acc += p_j * v[j][lo + d]
                    merged[i][lo + d] = acc

        attn = _affine(merged, params[pfx + "wo"], params[pfx + "bo"])
        x = _layer_norm(
            [[x[i][d] + attn[i][d] for d in range(d_model)] for i in range(t_len)],
            params[pfx + "ln1.gain"], params[pfx + "ln1.bias"],
        )
        hidden = _affine(x, params[pfx + "w1"], params[pfx + "b1"])
        hidden = [[_gelu(v_) for v_ in row] for row in hidden]
        ffn = _affine(hidden, params[pfx + "w2"], params[pfx + "b2"])
        x = _layer_norm(
            [[x[i][d] + ffn[i][d] for d in range(d_model)] for i in range(t_len)],
            params[pfx + "ln2.gain"], params[pfx + "ln2.bias"],
        )
    return x
