"""errdecode - EEG decoding of robot errors (preprocessing, ConvNet, rLDA, FB-CSP, statistics, maps)."""
