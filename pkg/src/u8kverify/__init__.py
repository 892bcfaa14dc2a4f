"""Abstract-interpretation verifier for small kernels on the 8-bit u8k machine.

Proves absence of privilege escalation (APE) and absence of runtime errors
(ARTE), either against one concrete user image or parametrically against
every user image that fits annotated interface types.
"""

__version__ = "0.1.0"
