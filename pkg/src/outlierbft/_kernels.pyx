# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled PBFT round kernel; same contract as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport qsort, malloc, free
from libc.math cimport INFINITY

cnp.import_array()


cdef int _cmp(const void* a, const void* b) noexcept nogil:
    cdef double x = (<double*>a)[0]
    cdef double y = (<double*>b)[0]
    return (x > y) - (x < y)


cdef inline double _qth(double* buf, Py_ssize_t m, Py_ssize_t q) noexcept nogil:
    if q < 1 or m < q:
        return INFINITY
    qsort(buf, m, sizeof(double), _cmp)
    return buf[q - 1]


def pbft_round(pp_arrival, double validate_cost, prep_delay, commit_delay, role, trusted,
               Py_ssize_t quorum, double deadline):
    cdef double[::1] pp = np.ascontiguousarray(pp_arrival, dtype=np.float64)
    cdef double[:, ::1] pd = np.ascontiguousarray(prep_delay, dtype=np.float64)
    cdef double[:, ::1] cd = np.ascontiguousarray(commit_delay, dtype=np.float64)
    cdef long[::1] rl = np.ascontiguousarray(role, dtype=np.int_)
    cdef cnp.uint8_t[::1] tr = np.ascontiguousarray(trusted, dtype=np.uint8)
    cdef Py_ssize_t n = rl.shape[0]
    if pp.shape[0] != n or tr.shape[0] != n or pd.shape[0] != n or pd.shape[1] != n \
            or cd.shape[0] != n or cd.shape[1] != n:
        raise ValueError("kernel inputs disagree on the replica count")
    prepared_arr = np.full(n, np.inf)
    committed_arr = np.full(n, np.inf)
    cdef double[::1] P = prepared_arr
    cdef double[::1] C = committed_arr
    send_arr = np.empty(n)
    cdef double[::1] send = send_arr
    cdef double* buf = <double*>malloc(max(n, 1) * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    cdef Py_ssize_t i, j, m
    cdef double t
    try:
        with nogil:
            for i in range(n):
                send[i] = pp[i] + validate_cost
            for j in range(n):
                if rl[j] > 1:
                    continue
                m = 0
                for i in range(n):
                    if not tr[i]:
                        continue
                    if rl[i] == 0 or (rl[i] == 3 and j % 2 == 0):
                        if i == j:
                            t = send[i]
                        else:
                            t = send[i] + pd[i, j]
                        if t <= deadline:
                            buf[m] = t
                            m += 1
                t = _qth(buf, m, quorum)
                if send[j] > t:
                    t = send[j]
                if t <= deadline:
                    P[j] = t
            for j in range(n):
                if rl[j] > 1 or P[j] == INFINITY:
                    continue
                m = 0
                for i in range(n):
                    if not tr[i]:
                        continue
                    if rl[i] == 0 and P[i] != INFINITY:
                        if i == j:
                            t = P[i]
                        else:
                            t = P[i] + cd[i, j]
                    elif rl[i] == 3 and j % 2 == 0:
                        t = send[i] + cd[i, j]
                    else:
                        continue
                    if t <= deadline:
                        buf[m] = t
                        m += 1
                t = _qth(buf, m, quorum)
                if P[j] > t:
                    t = P[j]
                if t <= deadline:
                    C[j] = t
    finally:
        free(buf)
    return prepared_arr, committed_arr
