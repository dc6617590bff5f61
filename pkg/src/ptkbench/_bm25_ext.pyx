# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled BM25 accumulation kernel."""

cimport cython


def accumulate(double[::1] scores, unsigned char[::1] touched,
               const int[::1] doc_indices, const int[::1] tfs,
               const double[::1] doc_lengths,
               double weight, double k1, double b, double avgdl):
    """Add ``weight * tf*(k1+1) / (tf + k1*(1-b+b*dl/avgdl))`` for one posting list."""
    cdef Py_ssize_t i, n = doc_indices.shape[0]
    cdef int d
    cdef double tf, norm
    cdef double k1p1 = k1 + 1.0
    cdef double base = 1.0 - b
    cdef double slope = b / avgdl
    for i in range(n):
        d = doc_indices[i]
        tf = tfs[i]
        norm = k1 * (base + slope * doc_lengths[d])
        scores[d] += weight * (tf * k1p1 / (tf + norm))
        touched[d] = 1
