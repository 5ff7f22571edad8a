# pipeline library: forward/inverse models, scalograms, classifiers, metrics
