//! Reference precision, recall and F1 for 24 methods across three datasets,
//! fake class then real class.

/// (dataset, method, [fake P, R, F1], [real P, R, F1])
pub const TABLE: [(&str, &str, [f64; 3], [f64; 3]); 24] = [
    ("PolitiFact", "SVM-RBF", [0.719, 0.605, 0.657], [0.766, 0.845, 0.803]),
    ("PolitiFact", "DTC", [0.647, 0.868, 0.742], [0.889, 0.690, 0.777]),
    ("PolitiFact", "IARNet", [0.909, 0.952, 0.930], [0.943, 0.892, 0.917]),
    ("PolitiFact", "HMGNN", [0.868, 0.846, 0.857], [0.895, 0.911, 0.903]),
    ("PolitiFact", "HetGNN", [0.971, 0.872, 0.920], [0.889, 0.976, 0.930]),
    ("PolitiFact", "BERT", [0.837, 0.900, 0.868], [0.926, 0.877, 0.901]),
    ("PolitiFact", "HGT", [0.861, 0.949, 0.902], [0.946, 0.854, 0.897]),
    ("PolitiFact", "HetTransformer", [1.000, 0.949, 0.974], [0.954, 1.000, 0.976]),
    ("GossipCop", "SVM-RBF", [0.793, 0.737, 0.764], [0.913, 0.935, 0.924]),
    ("GossipCop", "DTC", [0.832, 0.665, 0.739], [0.894, 0.955, 0.924]),
    ("GossipCop", "IARNet", [0.848, 0.922, 0.883], [0.974, 0.946, 0.960]),
    ("GossipCop", "HMGNN", [0.876, 0.876, 0.876], [0.960, 0.960, 0.960]),
    ("GossipCop", "HetGNN", [0.930, 0.913, 0.922], [0.972, 0.978, 0.975]),
    ("GossipCop", "BERT", [0.810, 0.940, 0.870], [0.981, 0.933, 0.956]),
    ("GossipCop", "HGT", [0.919, 0.915, 0.917], [0.973, 0.974, 0.973]),
    ("GossipCop", "HetTransformer", [0.978, 0.980, 0.979], [0.994, 0.993, 0.993]),
    ("PHEME", "SVM-RBF", [0.631, 0.517, 0.568], [0.737, 0.818, 0.775]),
    ("PHEME", "DTC", [0.670, 0.555, 0.607], [0.736, 0.819, 0.775]),
    ("PHEME", "IARNet", [0.740, 0.718, 0.729], [0.841, 0.856, 0.848]),
    ("PHEME", "HMGNN", [0.684, 0.696, 0.690], [0.817, 0.809, 0.813]),
    ("PHEME", "HetGNN", [0.773, 0.722, 0.747], [0.840, 0.873, 0.856]),
    ("PHEME", "BERT", [0.673, 0.716, 0.694], [0.829, 0.799, 0.814]),
    ("PHEME", "HGT", [0.689, 0.718, 0.703], [0.827, 0.807, 0.817]),
    ("PHEME", "HetTransformer", [0.756, 0.784, 0.770], [0.868, 0.849, 0.858]),
];
