pub mod attack;
pub mod baselines;
pub mod cli;
pub mod harness;
pub mod optim;
pub mod perm;
pub mod table;
pub mod victim;
