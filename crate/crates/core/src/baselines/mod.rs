//! Classical estimators used as references: snapshot WLS and Kalman filters.

pub mod ekf;
pub mod rtk_ekf;
pub mod wls;
