"""Compiled inner loops for the neural network and regression trees."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _sigmoid(t):
    if t >= 0.0:
        return 1.0 / (1.0 + np.exp(-t))
    e = np.exp(t)
    return e / (1.0 + e)


@njit(cache=True, nogil=True)
def nnet_forward(params, X, hidden, logistic):
    n, p = X.shape
    out = np.empty(n)
    ob = p * hidden
    ow2 = ob + hidden
    b2 = params[ow2 + hidden]
    for r in range(n):
        acc = b2
        for h in range(hidden):
            s = params[ob + h]
            for j in range(p):
                s += X[r, j] * params[j * hidden + h]
            acc += params[ow2 + h] * _sigmoid(s)
        out[r] = _sigmoid(acc) if logistic else acc
    return out


@njit(cache=True, nogil=True)
def nnet_loss_grad(params, X, y, hidden, logistic, l2):
    """Mean squared error (plus ``l2 * ||weights||^2``) and its gradient."""
    n, p = X.shape
    ob = p * hidden
    ow2 = ob + hidden
    b2 = params[ow2 + hidden]
    grad = np.zeros(params.shape[0])
    act = np.empty(hidden)
    loss = 0.0
    for r in range(n):
        acc = b2
        for h in range(hidden):
            s = params[ob + h]
            for j in range(p):
                s += X[r, j] * params[j * hidden + h]
            act[h] = _sigmoid(s)
            acc += params[ow2 + h] * act[h]
        if logistic:
            o = _sigmoid(acc)
            res = o - y[r]
            d_out = 2.0 * res * o * (1.0 - o) / n
        else:
            res = acc - y[r]
            d_out = 2.0 * res / n
        loss += res * res
        grad[ow2 + hidden] += d_out
        for h in range(hidden):
            grad[ow2 + h] += d_out * act[h]
            d_h = d_out * params[ow2 + h] * act[h] * (1.0 - act[h])
            grad[ob + h] += d_h
            for j in range(p):
                grad[j * hidden + h] += d_h * X[r, j]
    loss /= n
    if l2 > 0.0:
        for j in range(ob):
            loss += l2 * params[j] * params[j]
            grad[j] += 2.0 * l2 * params[j]
        for h in range(hidden):
            loss += l2 * params[ow2 + h] * params[ow2 + h]
            grad[ow2 + h] += 2.0 * l2 * params[ow2 + h]
    return loss, grad


@njit(cache=True, nogil=True)
def nnet_train_gd(params, X, y, hidden, logistic, l2, max_iter, step0, losses):
    """Full-batch gradient descent; each step halves from ``step0`` until the loss drops."""
    loss, grad = nnet_loss_grad(params, X, y, hidden, logistic, l2)
    losses[0] = loss
    n_acc = 0
    for it in range(max_iter):
        step = step0
        accepted = False
        for _ in range(60):
            trial = params - step * grad
            l_new, g_new = nnet_loss_grad(trial, X, y, hidden, logistic, l2)
            if l_new < loss:
                params = trial
                loss = l_new
                grad = g_new
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        n_acc += 1
        losses[n_acc] = loss
    return params, n_acc


@njit(cache=True, nogil=True)
def nnet_train_bfgs(params, X, y, hidden, logistic, l2, max_iter, losses):
    """BFGS with a halving (Armijo) line search; the loss never increases."""
    m = params.shape[0]
    Hinv = np.eye(m)
    loss, grad = nnet_loss_grad(params, X, y, hidden, logistic, l2)
    losses[0] = loss
    n_acc = 0
    for it in range(max_iter):
        gnorm = np.sqrt(np.sum(grad * grad))
        if gnorm < 1e-10:
            break
        d = -(Hinv @ grad)
        slope = np.sum(d * grad)
        if slope >= 0.0:
            Hinv = np.eye(m)
            d = -grad
            slope = -gnorm * gnorm
        step = 1.0
        accepted = False
        for _ in range(60):
            trial = params + step * d
            l_new, g_new = nnet_loss_grad(trial, X, y, hidden, logistic, l2)
            if l_new <= loss + 1e-4 * step * slope and l_new < loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        s = trial - params
        yv = g_new - grad
        sy = np.sum(s * yv)
        params = trial
        loss = l_new
        grad = g_new
        n_acc += 1
        losses[n_acc] = loss
        if sy > 1e-12:
            rho = 1.0 / sy
            Hy = Hinv @ yv
            yHy = np.sum(yv * Hy)
            Hinv = Hinv + ((sy + yHy) * rho * rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
    return params, n_acc


@njit(cache=True, nogil=True)
def build_tree(X, y, sample, min_leaf, mtry, node_keys):
    """Grow one regression tree on ``X[sample]`` by exhaustive variance-reduction splits.

    ``node_keys[k]`` holds random sort keys for node ``k``: the ``mtry``
    features with the smallest keys are candidates at that node.  Among equal
    gains the smallest feature index, then the smallest threshold, wins.

    Returns ``(feature, threshold, left, right, value, n_nodes)``; leaves have
    ``feature == -1``.
    """
    n = sample.shape[0]
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    idx = sample.copy()
    # explicit stack of (node, start, stop)
    st_node = np.empty(cap, dtype=np.int64)
    st_lo = np.empty(cap, dtype=np.int64)
    st_hi = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    top = 1
    n_nodes = 1
    xs = np.empty(n)
    ys = np.empty(n)
    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        m = hi - lo
        tot = 0.0
        tot2 = 0.0
        for r in range(lo, hi):
            tot += y[idx[r]]
            tot2 += y[idx[r]] * y[idx[r]]
        value[node] = tot / m
        if m < 2 * min_leaf:
            continue
        sse_parent = tot2 - tot * tot / m
        tol = 1e-12 * max(1.0, abs(sse_parent))
        order_f = np.argsort(node_keys[node % node_keys.shape[0]])
        cand = np.sort(order_f[:mtry])
        best_gain = tol
        best_f = -1
        best_thr = 0.0
        for ci in range(cand.shape[0]):
            f = cand[ci]
            seg = idx[lo:hi]
            vals = X[seg, f]
            order = np.argsort(vals, kind="mergesort")
            for r in range(m):
                xs[r] = vals[order[r]]
                ys[r] = y[seg[order[r]]]
            sl = 0.0
            for r in range(min_leaf - 1):
                sl += ys[r]
            for k in range(min_leaf, m - min_leaf + 1):
                sl += ys[k - 1]
                if xs[k - 1] == xs[k]:
                    continue
                sr = tot - sl
                gain = sl * sl / k + sr * sr / (m - k) - tot * tot / m
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_thr = 0.5 * (xs[k - 1] + xs[k])
                    if best_thr >= xs[k]:
                        best_thr = xs[k - 1]
        if best_f < 0:
            continue
        # partition idx[lo:hi] in place
        i = lo
        j = hi - 1
        while i <= j:
            if X[idx[i], best_f] <= best_thr:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        feature[node] = best_f
        threshold[node] = best_thr
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        st_node[top] = rnode
        st_lo[top] = i
        st_hi[top] = hi
        top += 1
        st_node[top] = lnode
        st_lo[top] = lo
        st_hi[top] = i
        top += 1
    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes], n_nodes


@njit(cache=True, nogil=True)
def predict_tree(X, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n)
    for r in range(n):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = value[node]
    return out
