"""Run configuration files: grammar, tree and analysis into RunConfig"""
