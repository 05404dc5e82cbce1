"""Command line surface for preparing data, training and evaluation."""

# This file exists to denote to Python that the folder is a package.
