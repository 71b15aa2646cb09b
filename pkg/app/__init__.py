# Traffic density estimation package

