/// Replica count the autoscaler asks for:
/// `clamp(ceil(current * utilization / target), min, max)`.
pub fn desired_replicas(current: u32, utilization: f64, target: f64, min: u32, max: u32) -> u32 {
    // tolerance keeps util == target an exact fixed point despite float noise
    let raw = (current as f64 * utilization / target - 1e-9).ceil();
    let raw = if raw.is_finite() && raw > 0.0 { raw as u32 } else { 0 };
    raw.clamp(min, max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scales_up_by_ratio() {
        assert_eq!(desired_replicas(2, 0.9, 0.5, 1, 10), 4);
    }

    #[test]
    fn fixed_point_at_target() {
        assert_eq!(desired_replicas(7, 0.5, 0.5, 1, 10), 7);
        assert_eq!(desired_replicas(3, 0.3, 0.3, 1, 10), 3);
    }

    #[test]
    fn clamped_at_max() {
        assert_eq!(desired_replicas(8, 0.95, 0.5, 2, 8), 8);
    }

    proptest! {
        #[test]
        fn always_within_bounds(cur in 0u32..50, util in 0.0f64..5.0, target in 0.05f64..1.0, min in 1u32..5, extra in 0u32..20) {
            let max = min + extra;
            let d = desired_replicas(cur, util, target, min, max);
            prop_assert!(d >= min && d <= max);
        }
    }
}
