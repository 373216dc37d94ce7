"""
Utilities shared by the lab: errors, validation, reports and plots.
"""
