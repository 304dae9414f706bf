"""Two-stage malware detection over syscall traces.

A random forest triages every window of a process's syscall stream; borderline
verdicts go to a slower sequence model while the process is rate-limited.
Everything runs on a deterministic virtual clock.
"""

__version__ = "0.1.0"
