"""Brute-force reference implementations used only by the tests.

They deliberately avoid the library's code paths: n-grams are listed
explicitly, LCS is found by enumerating every subsequence, and METEOR
alignments are enumerated exhaustively.
"""

from itertools import combinations


def all_ngrams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def bleu_oracle(cand, refs, max_n=4):
    if not cand:
        return 0.0
    # closest reference length, ties -> shorter
    best_len = None
    for r in refs:
        if best_len is None:
            best_len = len(r)
            continue
        d, bd = abs(len(r) - len(cand)), abs(best_len - len(cand))
        if d < bd or (d == bd and len(r) < best_len):
            best_len = len(r)
    product, k = 1.0, 0
    for n in range(1, max_n + 1):
        grams = all_ngrams(cand, n)
        if not grams:
            continue
        matched = 0
        for g in set(grams):
            cap = max(all_ngrams(r, n).count(g) for r in refs)
            matched += min(grams.count(g), cap)
        if matched == 0:
            return 0.0
        product *= matched / len(grams)
        k += 1
    brevity = 1.0 if best_len == 0 else min(1.0, len(cand) / best_len)
    return brevity * product ** (1.0 / k)


def gleu_oracle(cand, refs, max_n=4):
    if not cand:
        return 0.0
    cpool = [g for n in range(1, max_n + 1) for g in all_ngrams(cand, n)]
    scores = [0.0]
    for r in refs:
        rpool = [g for n in range(1, max_n + 1) for g in all_ngrams(r, n)]
        if not rpool:
            continue
        matches = sum(min(cpool.count(g), rpool.count(g)) for g in set(cpool))
        scores.append(min(matches / len(cpool), matches / len(rpool)))
    return max(scores)


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def lcs_oracle(a, b):
    for size in range(len(a), 0, -1):
        for idx in combinations(range(len(a)), size):
            if is_subsequence([a[i] for i in idx], b):
                return size
    return 0


def rouge_l_oracle(cand, refs, beta=1.0):
    if not cand:
        return 0.0
    best = 0.0
    for r in refs:
        lcs = lcs_oracle(cand, r)
        if lcs:
            rec, prec = lcs / len(r), lcs / len(cand)
            best = max(best, (1 + beta**2) * rec * prec / (rec + beta**2 * prec))
    return best


def chunks_of(alignment):
    pairs = sorted(alignment)
    if not pairs:
        return 0
    runs = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            runs += 1
    return runs


def all_alignments(cand, ref, ok, fixed=()):
    """Every one-to-one set of (i, j) pairs with ok(cand[i], ref[j]), extending ``fixed``."""
    used_i = {i for i, _ in fixed}
    used_j = {j for _, j in fixed}
    free_i = [i for i in range(len(cand)) if i not in used_i]
    out = []

    def rec(k, used, acc):
        if k == len(free_i):
            out.append(list(fixed) + acc)
            return
        rec(k + 1, used, acc)
        i = free_i[k]
        for j in range(len(ref)):
            if j not in used and j not in used_j and ok(cand[i], ref[j]):
                rec(k + 1, used | {j}, acc + [(i, j)])

    rec(0, frozenset(), [])
    return out


def best_alignment(cand, ref, ok, fixed=()):
    return min(all_alignments(cand, ref, ok, fixed), key=lambda a: (-len(a), chunks_of(a)))


def meteor_oracle(cand, refs, alpha=0.9, gamma=0.5, beta=3.0, synonyms=None):
    if not cand:
        return 0.0
    best = 0.0
    for r in refs:
        align = best_alignment(cand, r, lambda x, y: x == y)
        if synonyms:
            def syn(x, y):
                return y in synonyms.get(x, ()) or x in synonyms.get(y, ())

            align = best_alignment(cand, r, syn, tuple(align))
        m = len(align)
        if m == 0:
            continue
        p, rc = m / len(cand), m / len(r)
        f = p * rc / (alpha * p + (1 - alpha) * rc)
        pen = gamma * (chunks_of(align) / m) ** beta
        best = max(best, f * (1 - pen))
    return best
