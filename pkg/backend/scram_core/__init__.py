# scram_core package initializer
# Keeps scram_core importable as a package for mypy and tooling
