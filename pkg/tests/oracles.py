"""Brute-force reference implementations used to cross-check the metric stack.

Deliberately naive: plain dict/loop arithmetic, full DP tables, no shared
helpers with the package beyond the tokenizer and the frozen parameter
values. Single-reference only.
"""

from __future__ import annotations

import math

from rgvqa.textproc import tokenize
from rgvqa.metrics import stem


def ngram_list(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def count_dict(items):
    out = {}
    for it in items:
        out[it] = out.get(it, 0) + 1
    return out


def bleu_bruteforce(hypotheses, references, max_n=4):
    matched = {n: 0 for n in range(1, max_n + 1)}
    total = {n: 0 for n in range(1, max_n + 1)}
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = tokenize(hyp)
        r = tokenize(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            h_counts = count_dict(ngram_list(h, n))
            r_counts = count_dict(ngram_list(r, n))
            for gram, c in h_counts.items():
                matched[n] += min(c, r_counts.get(gram, 0))
            total[n] += len(ngram_list(h, n))
    if hyp_len == 0:
        return [0.0] * max_n
    if hyp_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    out = []
    for k in range(1, max_n + 1):
        product = 1.0
        zero = False
        for n in range(1, k + 1):
            if total[n] == 0 or matched[n] == 0:
                zero = True
                break
            product *= matched[n] / total[n]
        out.append(0.0 if zero else bp * product ** (1.0 / k))
    return out


def lcs_table(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


def rouge_l_bruteforce(hypotheses, references, beta=1.2):
    scores = []
    for hyp, ref in zip(hypotheses, references):
        h = tokenize(hyp)
        r = tokenize(ref)
        if not h and not r:
            scores.append(1.0)
            continue
        if not h or not r:
            scores.append(0.0)
            continue
        lcs = lcs_table(h, r)
        if lcs == 0:
            scores.append(0.0)
            continue
        p = lcs / len(h)
        rec = lcs / len(r)
        scores.append((1 + beta * beta) * rec * p / (rec + beta * beta * p))
    return sum(scores) / len(scores)


def meteor_bruteforce(hypotheses, references, alpha=0.9, beta=3.0, gamma=0.5):
    scores = []
    for hyp, ref in zip(hypotheses, references):
        h = tokenize(hyp)
        r = tokenize(ref)
        if not h and not r:
            scores.append(1.0)
            continue
        if not h or not r:
            scores.append(0.0)
            continue
        matched_h = {}
        used_r = set()
        for stage in ("exact", "stem"):
            for i in range(len(h)):
                if i in matched_h:
                    continue
                for j in range(len(r)):
                    if j in used_r:
                        continue
                    if stage == "exact":
                        same = h[i] == r[j]
                    else:
                        same = stem(h[i]) == stem(r[j])
                    if same:
                        matched_h[i] = j
                        used_r.add(j)
                        break
        m = len(matched_h)
        if m == 0:
            scores.append(0.0)
            continue
        p = m / len(h)
        rec = m / len(r)
        f_mean = p * rec / (alpha * p + (1 - alpha) * rec)
        pairs = sorted(matched_h.items())
        chunks = 1
        for k in range(1, len(pairs)):
            prev_h, prev_r = pairs[k - 1]
            cur_h, cur_r = pairs[k]
            if not (cur_h == prev_h + 1 and cur_r == prev_r + 1):
                chunks += 1
        penalty = gamma * (chunks / m) ** beta
        scores.append(f_mean * (1.0 - penalty))
    return sum(scores) / len(scores)


def cider_bruteforce(hypotheses, references, max_n=4, scale=10.0):
    m = len(references)
    ref_tokens = [tokenize(r) for r in references]
    hyp_tokens = [tokenize(h) for h in hypotheses]

    doc_freq = {n: {} for n in range(1, max_n + 1)}
    for r in ref_tokens:
        for n in range(1, max_n + 1):
            for gram in set(ngram_list(r, n)):
                doc_freq[n][gram] = doc_freq[n].get(gram, 0) + 1

    def tf_vec(tokens, n):
        grams = ngram_list(tokens, n)
        if not grams:
            return {}
        counts = count_dict(grams)
        return {g: c / len(grams) for g, c in counts.items()}

    def tfidf_vec(tokens, n):
        return {
            g: tf * math.log(m / max(doc_freq[n].get(g, 0), 1))
            for g, tf in tf_vec(tokens, n).items()
        }

    def cosine(a, b):
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return sum(a[g] * b.get(g, 0.0) for g in a) / (na * nb)

    total = 0.0
    for h, r in zip(hyp_tokens, ref_tokens):
        pair = 0.0
        for n in range(1, max_n + 1):
            hv = tfidf_vec(h, n)
            rv = tfidf_vec(r, n)
            degenerate = (
                hv
                and rv
                and max(abs(v) for v in hv.values()) == 0.0
                and max(abs(v) for v in rv.values()) == 0.0
            )
            if degenerate:
                pair += cosine(tf_vec(h, n), tf_vec(r, n)) / max_n
            else:
                pair += cosine(hv, rv) / max_n
        total += pair
    return scale * total / m
