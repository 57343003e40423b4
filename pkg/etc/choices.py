
# Response Families
FAMILY_CHOICES = [
    ('gaussian', 'Gaussian'),
    ('poisson', 'Poisson'),
    ('negative_binomial', 'Negative binomial'),
    ('compois', 'Conway-Maxwell-Poisson'),
    ('bernoulli', 'Bernoulli'),
]

# Link Functions
LINK_CHOICES = [
    ('identity', 'Identity'),
    ('log', 'Log'),
    ('logit', 'Logit'),
]

# Links allowed for each family (first entry is the default)
FAMILY_LINKS = {
    'gaussian': ['identity', 'log', 'logit'],
    'poisson': ['log', 'identity'],
    'negative_binomial': ['log', 'identity'],
    'compois': ['log', 'identity'],
    'bernoulli': ['logit'],
}

# Distance Metrics
DISTANCE_CHOICES = [
    ('euclidean', 'Euclidean'),
    ('haversine', 'Great-circle (km, lon/lat degrees)'),
]

# Covariance Families
COVARIANCE_CHOICES = [
    ('exponential', 'Exponential'),
    ('matern', 'Matern'),
]

# Fit Status
FIT_STATUS_CHOICES = [
    ('converged', 'Converged'),
    ('not_converged', 'Not converged'),
]
