"""Grid-of-dies LSTM accelerator toolchain.

Fixed-point LSTM inference (bit-exact golden model), mapping of networks
onto an n x n grid of fixed-capacity dies, a transaction-level simulation
of the grid with 4-bit valid/ready links, and a calibrated latency/energy
model for the whole arrangement.
"""

__version__ = "0.1.0"
