"""Bundle files for factors and datasets, trace and summary writers"""
