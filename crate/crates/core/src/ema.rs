//! Exponential-moving-average teacher updates.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decay used at optimizer step `step` (0-based): ramps as `1 - 1/(step+1)`
/// and saturates at `max`.
pub fn decay_at(step: u64, max: f64) -> f64 {
    (1.0 - 1.0 / (step as f64 + 1.0)).min(max)
}

/// `teacher <- decay * teacher + (1 - decay) * student`, elementwise.
pub fn ema_update(teacher: &mut [f32], student: &[f32], decay: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "teacher has {} values, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let d = decay as f32;
    let s = 1.0 - d;
    for (t, &x) in teacher.iter_mut().zip(student) {
        *t = d * *t + s * x;
    }
    Ok(())
}

/// Flat teacher parameters mirroring a student, one buffer per tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherState {
    pub params: Vec<Vec<f32>>,
    pub decay: f64,
    pub step: u64,
}

impl TeacherState {
    /// A teacher initialised as a copy of the student.
    pub fn from_student(student: &[&[f32]], decay: f64) -> Self {
        Self { params: student.iter().map(|p| p.to_vec()).collect(), decay, step: 0 }
    }

    /// One update with the scheduled decay, then advances the step counter.
    pub fn update(&mut self, student: &[&[f32]]) -> Result<()> {
        let d = decay_at(self.step, self.decay);
        self.update_with(student, d)
    }

    /// One update with an explicit decay.
    pub fn update_with(&mut self, student: &[&[f32]], decay: f64) -> Result<()> {
        if student.len() != self.params.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "teacher has {} tensors, student {}",
                self.params.len(),
                student.len()
            )));
        }
        if self.params.iter().zip(student).any(|(t, s)| t.len() != s.len()) {
            return Err(Error::InvalidArgument("teacher/student tensor shapes differ".into()));
        }
        for (t, s) in self.params.iter_mut().zip(student) {
            ema_update(t, s, decay)?;
        }
        self.step += 1;
        Ok(())
    }
}

/// Closed form of `k` constant-decay updates from `t0` through students
/// `s_1..s_k`: `d^k t0 + Σ_i (1-d) d^(k-i) s_i`.
pub fn closed_form(t0: f64, students: &[f64], decay: f64) -> f64 {
    let k = students.len() as i32;
    let mut acc = libm::pow(decay, k as f64) * t0;
    for (i, s) in students.iter().enumerate() {
        acc += (1.0 - decay) * libm::pow(decay, (k - 1 - i as i32) as f64) * s;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn degenerate_decays() {
        let mut t = vec![1.0, 2.0];
        ema_update(&mut t, &[5.0, 6.0], 0.0).unwrap();
        assert_eq!(t, vec![5.0, 6.0]);
        ema_update(&mut t, &[9.0, 9.0], 1.0).unwrap();
        assert_eq!(t, vec![5.0, 6.0]);
    }

    #[test]
    fn two_updates_expand() {
        // 0.81 t0 + 0.09 s1 + 0.1 s2
        let (t0, s1, s2) = (1.0, 2.0, 3.0);
        assert!((closed_form(t0, &[s1, s2], 0.9) - (0.81 + 0.18 + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn schedule_saturates() {
        assert_eq!(decay_at(0, 0.99), 0.0);
        assert_eq!(decay_at(1, 0.99), 0.5);
        assert_eq!(decay_at(1000, 0.99), 0.99);
    }

    #[test]
    fn shape_mismatch() {
        let mut st = TeacherState::from_student(&[&[1.0, 2.0]], 0.9);
        assert!(st.update(&[&[1.0]]).is_err());
        assert_eq!(st.step, 0);
    }
}
