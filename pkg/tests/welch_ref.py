"""High-precision Welch t-test reference built on mpmath."""

import mpmath


def welch_reference(a, b, dps: int = 50):
    """(t, df, two-sided p) computed at ``dps`` decimal digits."""
    with mpmath.workdps(dps):
        a = [mpmath.mpf(float(x)) for x in a]
        b = [mpmath.mpf(float(x)) for x in b]
        na, nb = len(a), len(b)
        ma, mb = mpmath.fsum(a) / na, mpmath.fsum(b) / nb
        va = mpmath.fsum((x - ma) ** 2 for x in a) / (na - 1) / na
        vb = mpmath.fsum((x - mb) ** 2 for x in b) / (nb - 1) / nb
        t = (ma - mb) / mpmath.sqrt(va + vb)
        df = (va + vb) ** 2 / (va ** 2 / (na - 1) + vb ** 2 / (nb - 1))
        p = mpmath.betainc(df / 2, mpmath.mpf(1) / 2, 0, df / (df + t * t), regularized=True)
        return float(t), float(df), float(p)
