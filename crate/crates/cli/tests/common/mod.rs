pub mod fedavg_reference;
