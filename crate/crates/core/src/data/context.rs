use super::time::TimeAxis;
use crate::error::{Error, Result};

/// `f_RZ`: repeat a length-`M` row over `n` zones, giving `[n × M]`.
pub fn repeat_zones(row: &[f64], n: usize) -> Vec<f64> {
    let out: Vec<f64> = (0..n).flat_map(|_| row.iter().copied()).collect();
    debug_assert!(out.chunks(row.len().max(1)).all(|r| r == row));
    out
}

/// `f_RT`: repeat a per-zone column over `t` slots, giving `[t × N]`.
pub fn repeat_time(col: &[f64], t: usize) -> Vec<f64> {
    repeat_zones(col, t)
}

/// Time contexts of one slot: day-part one-hot and weekend flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotContext {
    pub day_part: [f64; 3],
    pub weekend: f64,
}

/// Contexts for every slot of the axis.
pub fn encode_contexts(axis: &TimeAxis) -> Result<Vec<SlotContext>> {
    if axis.slots_per_day() % 3 != 0 {
        return Err(Error::config(format!(
            "{} slots per day cannot be split into three equal day parts",
            axis.slots_per_day()
        )));
    }
    Ok((0..axis.len())
        .map(|s| {
            let mut day_part = [0.0; 3];
            day_part[axis.day_part(s)] = 1.0;
            SlotContext {
                day_part,
                weekend: if axis.is_weekend(s) { 1.0 } else { 0.0 },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    #[test]
    fn repeats() {
        let rz = repeat_zones(&[1.0, 2.0, 3.0], 4);
        assert_eq!(rz.len(), 12);
        assert!(rz.chunks(3).all(|r| r == [1.0, 2.0, 3.0]));
        let rt = repeat_time(&[5.0, 6.0], 3);
        assert_eq!(rt, vec![5.0, 6.0, 5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn contexts() {
        let axis = TimeAxis::new(NaiveDate::from_ymd_opt(2016, 1, 2).unwrap(), 1, 60).unwrap();
        let c = encode_contexts(&axis).unwrap();
        assert_eq!(c[3].day_part, [1.0, 0.0, 0.0]);
        assert_eq!(c[8].day_part, [0.0, 1.0, 0.0]);
        assert_eq!(c[23].day_part, [0.0, 0.0, 1.0]);
        assert!(c.iter().all(|s| s.weekend == 1.0 && s.day_part.iter().sum::<f64>() == 1.0));
        let bad = TimeAxis::new(NaiveDate::from_ymd_opt(2016, 1, 2).unwrap(), 1, 720).unwrap();
        assert!(matches!(encode_contexts(&bad), Err(Error::Config(_))));
    }
}
