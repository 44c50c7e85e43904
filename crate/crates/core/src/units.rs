//! Unit conversions between the SI values used internally and the
//! engineering units used in configuration files and reports.

pub const PA_PER_BAR: f64 = 1.0e5;
pub const SECONDS_PER_HOUR: f64 = 3600.0;

pub fn bar(value: f64) -> f64 {
    value * PA_PER_BAR
}

pub fn to_bar(pascal: f64) -> f64 {
    pascal / PA_PER_BAR
}

pub fn m3_per_hour(value: f64) -> f64 {
    value / SECONDS_PER_HOUR
}

pub fn to_m3_per_hour(m3_per_s: f64) -> f64 {
    m3_per_s * SECONDS_PER_HOUR
}

pub fn grams_per_second(value: f64) -> f64 {
    value * 1.0e-3
}

pub fn to_grams_per_second(kg_per_s: f64) -> f64 {
    kg_per_s * 1.0e3
}
