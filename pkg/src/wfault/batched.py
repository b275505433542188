"""Batched, fault-aware layer kernels.

Each kernel computes the fault-free result for a batch of inferences with dense
integer-exact matrix products (float64 is exact here: every partial sum stays
far below 2**53), then recomputes only the accumulation chains and transform
slices that contain a faulted op, replaying the exact wrap-and-flip semantics
of the scalar engines in :mod:`wfault.conv`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .conv import (ADD, FILTER_OPS, G_FRAC_EXTRA, INPUT_OPS, MUL, OUTPUT_OPS, ConvSpec, PlainOps, SiteLayout,
                   filter_transform, input_transform, output_transform)
from .faults import FaultConfig, stage_masks
from .fxp import DatapathSpec, FxpFormat, flip_word, requantize, wrap

CHAIN_BLOCK = 1 << 22  # max elements of a (chains x length) scratch array


@dataclass
class StageFaults:
    """Faulted sites of one stage across a batch: inference index, local site offset, XOR mask."""

    b: np.ndarray
    local: np.ndarray
    mask: np.ndarray
    protected: int = 0

    def __len__(self):
        return len(self.b)


def gather_faults(cfgs: list[FaultConfig], layer_id: int, layout: SiteLayout) -> dict[tuple[str, str], StageFaults]:
    out = {}
    for st in layout.stages:
        bs, ls, ms = [], [], []
        prot = 0
        for b, cfg in enumerate(cfgs):
            sites, masks, p = stage_masks(cfg, layer_id, st)
            prot += p
            if len(sites):
                bs.append(np.full(len(sites), b, dtype=np.int64))
                ls.append(sites - st.base)
                ms.append(masks)
        if bs:
            out[(st.kind, st.name)] = StageFaults(np.concatenate(bs), np.concatenate(ls), np.concatenate(ms), prot)
        else:
            e = np.zeros(0, dtype=np.int64)
            out[(st.kind, st.name)] = StageFaults(e, e, e, prot)
    return out


def _matmul_exact(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.rint(np.matmul(a.astype(np.float64), b.astype(np.float64))).astype(np.int64)


def _replay_chains(prod: np.ndarray, mul_mask: np.ndarray, add_chain: np.ndarray, add_step: np.ndarray,
                   add_mask: np.ndarray, mul_width: int, add_width: int) -> np.ndarray:
    """Final accumulator of each chain ``prod[e, :]`` with flips replayed in order.

    ``mul_mask`` is (E, K); ADD flips are given as parallel arrays (chain, step,
    mask) where step k >= 1 is the add that folds ``prod[:, k]`` in.
    """
    prod = np.where(mul_mask != 0, flip_word(prod, mul_mask, mul_width), prod)
    S = np.cumsum(prod, axis=1)
    D = np.zeros(prod.shape[0], dtype=np.int64)
    if len(add_chain):
        order = np.lexsort((add_step, add_chain))
        ch, stp, msk = add_chain[order], add_step[order], add_mask[order]
        first = np.r_[True, ch[1:] != ch[:-1]]
        start = np.maximum.accumulate(np.where(first, np.arange(len(ch)), 0))
        rank = np.arange(len(ch)) - start
        for r in range(int(rank.max()) + 1):
            sel = rank == r
            e = ch[sel]
            cur = wrap(S[e, stp[sel]] + D[e], add_width)
            D[e] += flip_word(cur, msk[sel], add_width) - cur
    return wrap(S[:, -1] + D, add_width)


def _chain_correct(acc: np.ndarray, chain_keys_mul, chain_keys_add, gather, K: int, fm: StageFaults,
                   fa: StageFaults, mul_pos: np.ndarray, add_pos: np.ndarray, mul_width: int, add_width: int):
    """Recompute faulted chains in place.

    ``acc`` is indexed by flat chain id; ``chain_keys_*`` give each faulted
    site's flat chain id, ``*_pos`` its position along the chain.  ``gather``
    maps an array of chain ids to their (E, K) product rows.
    """
    chains = np.union1d(chain_keys_mul, chain_keys_add)
    if not len(chains):
        return
    step = max(1, CHAIN_BLOCK // max(K, 1))
    for lo in range(0, len(chains), step):
        cs = chains[lo:lo + step]
        prod = gather(cs)
        mm = np.zeros(prod.shape, dtype=np.int64)
        sel = np.isin(chain_keys_mul, cs)
        if sel.any():
            rows = np.searchsorted(cs, chain_keys_mul[sel])
            mm[rows, mul_pos[sel]] = fm.mask[sel]
        sel = np.isin(chain_keys_add, cs)
        rows = np.searchsorted(cs, chain_keys_add[sel])
        acc[cs] = _replay_chains(prod, mm, rows, add_pos[sel], fa.mask[sel], mul_width, add_width)


def chain_layer(wm: np.ndarray, cols: np.ndarray, layout: SiteLayout, faults: dict) -> np.ndarray:
    """Accumulator words for out[b, f, p] = sum_k wm[f, k] * cols[b, k, p], k ascending.

    Used by both the direct convolution (cols from im2col) and the FC layer
    (P = 1).  Chain id o = f * P + p matches the scalar engines' site order.
    """
    B, K, P = cols.shape
    F = wm.shape[0]
    ms, acs = layout.stage(MUL, "mul"), layout.stage(ADD, "accum")
    acc = wrap(_matmul_exact(wm, cols), acs.width).reshape(B * F * P)
    fm, fa = faults[(MUL, "mul")], faults[(ADD, "accum")]
    if len(fm) or len(fa):
        n_chain = F * P
        key_m = fm.b * n_chain + fm.local // K
        key_a = fa.b * n_chain + (fa.local // (K - 1) if K > 1 else fa.local)
        pos_m = fm.local % K
        pos_a = fa.local % (K - 1) + 1 if K > 1 else fa.local

        def gather(cs):
            b, o = np.divmod(cs, n_chain)
            f, p = np.divmod(o, P)
            return wm[f] * cols[b, :, p]

        _chain_correct(acc, key_m, key_a, gather, K, fm, fa, pos_m, pos_a, ms.width, acs.width)
    return acc.reshape(B, F, P)


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    p, s, k = spec.padding, spec.stride, spec.kernel
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :spec.out_h, :spec.out_w]
    B, C = x.shape[:2]
    # -> (B, C, k, k, Ho, Wo) so the tap index is c*9 + i*3 + j
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * k * k, spec.out_h * spec.out_w)


def direct_conv_batch(x: np.ndarray, w: np.ndarray, spec: ConvSpec, fmt: FxpFormat, layout: SiteLayout,
                      faults: dict) -> np.ndarray:
    cols = im2col(x, spec)
    acc = chain_layer(w.reshape(spec.out_channels, -1), cols, layout, faults)
    out = requantize(acc, 2 * fmt.frac_bits, fmt)
    return out.reshape(x.shape[0], spec.out_channels, spec.out_h, spec.out_w)


def fc_batch(x: np.ndarray, w: np.ndarray, fmt: FxpFormat, layout: SiteLayout, faults: dict) -> np.ndarray:
    acc = chain_layer(w, x.reshape(x.shape[0], -1, 1), layout, faults)
    return requantize(acc[:, :, 0], 2 * fmt.frac_bits, fmt)


class MaskedOps:
    """Vectorised transform ops over E slices with per-op XOR masks."""

    def __init__(self, add_masks, mul_masks, add_width: int, mul_width: int = 0):
        self.add_masks, self.mul_masks = add_masks, mul_masks
        self.add_width, self.mul_width = add_width, mul_width
        self.i_add = self.i_mul = 0

    def _flip(self, v, masks, i, width):
        m = masks[:, i]
        return flip_word(v, m, width) if m.any() else v

    def add(self, a, b):
        v = wrap(a + b, self.add_width)
        self.i_add += 1
        return self._flip(v, self.add_masks, self.i_add - 1, self.add_width)

    def sub(self, a, b):
        v = wrap(a - b, self.add_width)
        self.i_add += 1
        return self._flip(v, self.add_masks, self.i_add - 1, self.add_width)

    def half(self, v):
        v = wrap(v, self.mul_width)
        self.i_mul += 1
        return self._flip(v, self.mul_masks, self.i_mul - 1, self.mul_width)


def _slice_masks(faults: StageFaults, per_slice: int, slice_ids: np.ndarray, n_slices_key: int) -> np.ndarray:
    """(E, per_slice) mask table for the given flat slice ids (b * n_slices + slice)."""
    out = np.zeros((len(slice_ids), per_slice), dtype=np.int64)
    if len(faults):
        keys = faults.b * n_slices_key + faults.local // per_slice
        sel = np.isin(keys, slice_ids)
        rows = np.searchsorted(slice_ids, keys[sel])
        out[rows, faults.local[sel] % per_slice] = faults.mask[sel]
    return out


def _as_grid(a: np.ndarray, n: int, m: int):
    return [[a[..., i, j] for j in range(m)] for i in range(n)]


def _from_grid(g) -> np.ndarray:
    return np.stack([np.stack(row, axis=-1) for row in g], axis=-2)


def filter_transform_dense(w: np.ndarray) -> np.ndarray:
    """Fault-free U for weights (F, C, 3, 3)."""
    return _from_grid(filter_transform(_as_grid(w, 3, 3), PlainOps()))


def winograd_conv_batch(x: np.ndarray, w: np.ndarray, spec: ConvSpec, fmt: FxpFormat, layout: SiteLayout,
                        faults: dict, U_base: np.ndarray | None = None) -> np.ndarray:
    B = x.shape[0]
    F, C = spec.out_channels, spec.in_channels
    TY, TX = spec.tiles
    T = TY * TX
    wide = layout.stage(MUL, "mul").width
    if U_base is None:
        U_base = filter_transform_dense(w)

    # filter transform: per-inference overrides of faulted (k, c) slices
    fa_f, fm_f = faults[(ADD, "filter")], faults[(MUL, "filter")]
    n_add_f, n_mul_f = FILTER_OPS
    ukeys = np.union1d(fa_f.b * (F * C) + fa_f.local // n_add_f, fm_f.b * (F * C) + fm_f.local // n_mul_f)
    U_stack = U_base[None]
    ub_idx = np.zeros(B, dtype=np.int64)
    if len(ukeys):
        ob, osl = np.divmod(ukeys, F * C)
        ops = MaskedOps(_slice_masks(fa_f, n_add_f, ukeys, F * C), _slice_masks(fm_f, n_mul_f, ukeys, F * C),
                        layout.stage(ADD, "filter").width, layout.stage(MUL, "filter").width)
        g = w.reshape(F * C, 3, 3)[osl]
        U_new = _from_grid(filter_transform(_as_grid(g, 3, 3), ops))
        hit_b = np.unique(ob)
        U_stack = np.repeat(U_base[None], len(hit_b) + 1, axis=0)
        ub_idx[hit_b] = np.arange(1, len(hit_b) + 1)
        U_stack.reshape(-1, F * C, 4, 4)[ub_idx[ob], osl] = U_new

    # input transform
    p = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p + 2 * TY - spec.out_h), (p, p + 2 * TX - spec.out_w)))
    tiles = sliding_window_view(xp, (4, 4), axis=(2, 3))[:, :, ::2, ::2][:, :, :TY, :TX]
    tiles = tiles.reshape(B, C, T, 4, 4)
    in_w = layout.stage(ADD, "input").width
    V = wrap(_from_grid(input_transform(_as_grid(tiles, 4, 4), PlainOps())), in_w)
    fa_i = faults[(ADD, "input")]
    if len(fa_i):
        vkeys = np.unique(fa_i.b * (C * T) + fa_i.local // INPUT_OPS)
        ops = MaskedOps(_slice_masks(fa_i, INPUT_OPS, vkeys, C * T), None, in_w)
        vb, vs = np.divmod(vkeys, C * T)
        V.reshape(B, C * T, 4, 4)[vb, vs] = _from_grid(input_transform(_as_grid(tiles.reshape(B, C * T, 4, 4)[vb, vs], 4, 4), ops))

    # element-wise products accumulated over channels
    Ue = U_stack.reshape(-1, F, C, 16).transpose(0, 3, 1, 2)  # (S, 16, F, C)
    Ve = V.reshape(B, C, T, 16).transpose(0, 3, 1, 2)  # (B, 16, C, T)
    M = np.empty((B, 16, F, T), dtype=np.int64)
    plain = ub_idx == 0
    if plain.any():
        M[plain] = _matmul_exact(Ue[0], Ve[plain])
    for b in np.flatnonzero(~plain):
        M[b] = _matmul_exact(Ue[ub_idx[b]], Ve[b])
    M = wrap(M, wide)
    M = np.ascontiguousarray(M.transpose(0, 2, 3, 1)).reshape(B * F * T * 16)  # chain id ((b*F + k)*T + t)*16 + e
    fm, fa = faults[(MUL, "mul")], faults[(ADD, "accum")]
    if len(fm) or len(fa):
        e_m = fm.local % 16
        q = fm.local // 16
        t_m = q % T
        q = q // T
        k_m = q // C
        c_m = q % C
        key_m = ((fm.b * F + k_m) * T + t_m) * 16 + e_m
        if C > 1:
            pos_a = fa.local % (C - 1) + 1
            q = fa.local // (C - 1)
        else:
            pos_a, q = fa.local, fa.local
        key_a = fa.b * (F * T * 16) + q
        Uflat = U_stack.reshape(-1, F, C, 16)
        Vflat = V.reshape(B, C, T, 16)

        def gather(cs):
            rest, e = np.divmod(cs, 16)
            rest, t = np.divmod(rest, T)
            b, k = np.divmod(rest, F)
            return Uflat[ub_idx[b], k, :, e] * Vflat[b, :, t, e]

        _chain_correct(M, key_m, key_a, gather, C, fm, fa, c_m, pos_a, wide, wide)
    M = M.reshape(B, F, T, 4, 4)

    # output transform and requantisation
    Y = wrap(_from_grid(output_transform(_as_grid(M, 4, 4), PlainOps())), wide)
    fa_o = faults[(ADD, "output")]
    if len(fa_o):
        okeys = np.unique(fa_o.b * (F * T) + fa_o.local // OUTPUT_OPS)
        ops = MaskedOps(_slice_masks(fa_o, OUTPUT_OPS, okeys, F * T), None, wide)
        ob, osl = np.divmod(okeys, F * T)
        Y.reshape(B, F * T, 2, 2)[ob, osl] = _from_grid(output_transform(_as_grid(M.reshape(B, F * T, 4, 4)[ob, osl], 4, 4), ops))
    out = requantize(Y, 2 * fmt.frac_bits + G_FRAC_EXTRA, fmt)  # (B, F, T, 2, 2)
    out = out.reshape(B, F, TY, TX, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, F, 2 * TY, 2 * TX)
    return out[:, :, :spec.out_h, :spec.out_w]
