"""
B-minus tree storage engine

An embedded ordered key-value store that cuts write amplification on
storage with built-in transparent compression: deterministic page
shadowing, per-page modification logging and sparse redo logging, run
over a simulated compressing block device, with a benchmark and
crash-test driver.
"""
