import logging
import os

import numba
import numpy as np

logger = logging.getLogger(__name__)


@numba.njit(cache=True)
def _classify_point(edges, px, py):
    """Even-odd test against an edge table; points on any edge count as inside"""
    inside = False
    for k in range(edges.shape[0]):
        x1 = edges[k, 0]
        y1 = edges[k, 1]
        x2 = edges[k, 2]
        y2 = edges[k, 3]

        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        if cross == 0.0:
            if min(x1, x2) <= px and px <= max(x1, x2) and min(y1, y2) <= py and py <= max(y1, y2):
                return True

        # half-open in y so a ray through a vertex is counted once
        if (y1 > py) != (y2 > py):
            x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px < x_cross:
                inside = not inside
    return inside


@numba.njit(cache=True, parallel=True)
def points_in_edges(edges, xs, ys):
    """Classify many points against one polygon given as an (E, 4) edge table"""
    n = xs.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for k in numba.prange(n):
        out[k] = _classify_point(edges, xs[k], ys[k])
    return out


def configure_threads(threads: int) -> int:
    """Set numba's worker count; 0 means one per CPU. Returns the count in use"""
    available = numba.config.NUMBA_NUM_THREADS
    wanted = threads if threads > 0 else (os.cpu_count() or 1)
    wanted = max(1, min(wanted, available))
    numba.set_num_threads(wanted)
    logger.info(f"Using {wanted} worker thread(s)")
    return wanted
