"""Contact-pattern classifiers: task labels, numpy networks, shallow baselines, training"""
