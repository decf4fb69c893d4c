//! Embedded experiment presets. Each is a complete config file; `--preset
//! NAME` loads it verbatim, so the files double as documented examples of
//! the schema.

pub const PRESETS: &[(&str, &str)] = &[
    (
        "benchmark_hysteresis",
        include_str!("../presets/benchmark_hysteresis.toml"),
    ),
    ("kac_1d", include_str!("../presets/kac_1d.toml")),
    ("morse_discs", include_str!("../presets/morse_discs.toml")),
    (
        "tiny_verification",
        include_str!("../presets/tiny_verification.toml"),
    ),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn names() -> String {
    PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
}
