"""spinlab: a desk-scale laboratory for seq2seq model spinning.

Synthetic corpora, a tiny float64 encoder-decoder transformer, adversarial
task stacking with pseudo-word projection, MGDA loss balancing,
supply-chain transfer attacks, from-scratch generation metrics, and a
black-box MAD-based trigger scan.
"""

__version__ = "0.1.0"
