"""Inner ADMM solvers for the mode subproblems"""
