"""Pure-Python BM25 accumulation kernel, used when the compiled one is unavailable."""


def accumulate(scores, touched, doc_indices, tfs, doc_lengths, weight, k1, b, avgdl):
    """Add ``weight * tf*(k1+1) / (tf + k1*(1-b+b*dl/avgdl))`` for one posting list."""
    k1p1 = k1 + 1.0
    base = 1.0 - b
    slope = b / avgdl
    for d, tf in zip(doc_indices.tolist(), tfs.tolist()):
        norm = k1 * (base + slope * doc_lengths[d])
        scores[d] += weight * (tf * k1p1 / (tf + norm))
        touched[d] = 1
