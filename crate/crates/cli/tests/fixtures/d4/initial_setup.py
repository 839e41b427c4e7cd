with open('workbook.txt', 'w') as fh:
    fh.write('B2:B6=350000,140000,100000,60000,30000\n')
