"""Remote acquisition of forensically verified raw disk images.

The package splits a read-only evidence source into digest-tagged chunks,
streams them to a multi-session verification server over a framed binary
protocol, and stores the recombined image together with chain-of-custody
metadata. Corrupted chunks are NAKed and retransmitted; interrupted
sessions resume from the first unverified chunk.
"""

__version__ = "0.1.0"
