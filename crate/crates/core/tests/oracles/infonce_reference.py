"""High-precision InfoNCE reference values (mpmath, 50 digits).

Matrix entries: s[i][j] = ((7*i + 13*j) % 17 - 8) * 3.1 + 0.25 * i, B = 6.
Also the log-sum-exp minus max gap for a length-4096 row holding one 50.0
and 4095 zeros.
"""

from mpmath import mp, mpf, exp, log

mp.dps = 50
B = 6
s = [[(mpf((7 * i + 13 * j) % 17) - 8) * mpf("3.1") + mpf("0.25") * i for j in range(B)] for i in range(B)]
for i in range(B):
    lse = log(sum(exp(v) for v in s[i]))
    print(f"row {i}: loss {mp.nstr(lse - s[i][i], 20)}  logsumexp {mp.nstr(lse, 20)}")
gap = log(exp(mpf(50)) + 4095) - 50
print("gap 4096:", mp.nstr(gap, 20))
