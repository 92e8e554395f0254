"""Probability / non-probability data integration estimators and simulator."""
