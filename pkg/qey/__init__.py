"""
.. module:: qey
    :synopsis: software post-quantum FIDO2 authenticator, CTAPHID transport,
        relying-party verifier and benchmark harness
"""

__license__ = "Apache License 2.0"
__version__ = "0.3.0"
